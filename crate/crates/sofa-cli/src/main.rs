use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sofa::integrity::{audit, detect_conflicts, CoiRules, CartelThresholds};
use sofa::io;
use sofa::mechanism::{closed_form_totals, run_fixed_point, DENSE_SOLVE_LIMIT};
use sofa::metrics::{cost_model, metrics_report, ConvergenceSummary, CostCase};
use sofa::population::{generate_community, load_community, save_community, Agent, Community, CommunitySpec};
use sofa::simulation::{run_partitioned, sweep, CommunitySource, Scenario, ScenarioConfig, VisibleState};
use sofa::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;
const EXIT_INTEGRITY: u8 = 4;

/// Self-organized fund allocation simulator.
#[derive(Parser, Debug)]
#[command(name = "sofa", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Scenario config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "PATH")]
    out_dir: Option<PathBuf>,
    /// Overrides the fixed-point tolerance.
    #[arg(long, global = true, value_name = "FLOAT")]
    tolerance: Option<f64>,
    /// Overrides the fixed-point iteration cap.
    #[arg(long, global = true, value_name = "INT")]
    max_iter: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a community file.
    Generate {
        /// Community spec (JSON); defaults to the config's generate section.
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
        /// Number of agents when no spec is given.
        #[arg(long)]
        n_agents: Option<usize>,
        /// Destination file; defaults to OUT_DIR/community.json.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Run a scenario and write its result files.
    Run,
    /// Run the scenario once per donation fraction.
    Sweep {
        /// Comma-separated fractions in [0, 1).
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        fractions: Vec<f64>,
    },
    /// Check a transfers ledger for conflicts of interest and cartels.
    Audit {
        #[arg(long, value_name = "PATH")]
        transfers: PathBuf,
        /// Community file; defaults to the config's community.
        #[arg(long, value_name = "PATH")]
        community: Option<PathBuf>,
    },
    /// Cross-check fixed-point iteration against the dense closed form.
    Verify,
    /// Metrics from a stored run directory and optional cost cases.
    Report {
        /// Cost case file (JSON array of cases).
        #[arg(long, value_name = "PATH")]
        cost: Option<PathBuf>,
        /// Community file used for group shares.
        #[arg(long, value_name = "PATH")]
        community: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::NotConverged { .. } => EXIT_CONVERGENCE,
            _ => EXIT_OTHER,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CliResult = std::result::Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult {
    let g = &cli.global;
    match &cli.command {
        Command::Generate { spec, n_agents, output } => generate(g, spec.as_deref(), *n_agents, output.as_deref()),
        Command::Run => run(g),
        Command::Sweep { fractions } => run_sweep(g, fractions),
        Command::Audit { transfers, community } => run_audit(g, transfers, community.as_deref()),
        Command::Verify => verify(g),
        Command::Report { cost, community } => report(g, cost.as_deref(), community.as_deref()),
    }
}

fn load_config(g: &GlobalArgs) -> Result<ScenarioConfig, Failure> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| fail(EXIT_CONFIG, "--config is required for this command"))?;
    let mut config = io::parse_and_validate_config(path)?;
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(tol) = g.tolerance {
        config.policy.tolerance = tol;
    }
    if let Some(max_iter) = g.max_iter {
        config.policy.max_iter = max_iter;
    }
    let issues = config.issues();
    if !issues.is_empty() {
        return Err(Error::Config(issues).into());
    }
    Ok(config)
}

fn out_dir(g: &GlobalArgs, config: Option<&ScenarioConfig>) -> PathBuf {
    g.out_dir
        .clone()
        .or_else(|| config.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("sofa-out"))
}

fn generate(g: &GlobalArgs, spec: Option<&Path>, n_agents: Option<usize>, output: Option<&Path>) -> CliResult {
    let (spec, seed, config) = match (spec, n_agents) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| fail(EXIT_OTHER, format!("{}: {e}", path.display())))?;
            let spec: CommunitySpec = serde_json::from_str(&text)
                .map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
            (spec, g.seed.unwrap_or(0), None)
        }
        (None, Some(n)) => (CommunitySpec::new(n), g.seed.unwrap_or(0), None),
        (None, None) => {
            let config = load_config(g)?;
            match &config.community {
                CommunitySource::Generate(spec) => (spec.clone(), config.seed, Some(config)),
                CommunitySource::File(_) => {
                    return Err(fail(EXIT_CONFIG, "config community is a file; pass --spec or --n-agents"))
                }
            }
        }
    };
    let issues = spec.issues("");
    if !issues.is_empty() {
        return Err(Error::Config(issues).into());
    }
    let community = generate_community(&spec, seed)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = out_dir(g, config.as_ref());
            std::fs::create_dir_all(&dir).map_err(|e| fail(EXIT_OTHER, format!("{}: {e}", dir.display())))?;
            dir.join("community.json")
        }
    };
    save_community(&community, &path)?;
    println!(
        "wrote {} agents and {} coauthor edges to {}",
        community.len(),
        community.coauthor_edges().len(),
        path.display()
    );
    Ok(0)
}

fn run(g: &GlobalArgs) -> CliResult {
    let config = load_config(g)?;
    let dir = out_dir(g, Some(&config));
    if config.policy.domain_budgets.is_some() {
        let parts = run_partitioned(&config)?;
        let manifest = io::write_partitioned_outputs(&parts, &config, &dir)?;
        for part in &parts {
            print_summary(&part.domain, &part.result);
        }
        println!("outputs in {}", dir.display());
        return Ok(if manifest.failure.is_some() { EXIT_CONVERGENCE } else { 0 });
    }
    let result = Scenario::prepare(&config)?.run()?;
    io::write_outputs(&result, &config, &dir)?;
    print_summary("scenario", &result);
    println!("outputs in {}", dir.display());
    match &result.failure {
        Some(f) => Err(fail(
            EXIT_CONVERGENCE,
            format!(
                "round {} did not converge after {} iterations (residual {:e}); partial results written",
                f.round, f.iterations, f.residual
            ),
        )),
        None => Ok(0),
    }
}

fn print_summary(label: &str, result: &sofa::ScenarioResult) {
    let gini = result.metrics.as_ref().map(|m| format!("{:.6}", m.gini)).unwrap_or_else(|| "n/a".into());
    println!(
        "{label}: {} agents, {} round(s), {} transfers, gini {gini}, conflicted transfers {}, cartel flags {}",
        result.community.len(),
        result.history.len(),
        result.ledger.len(),
        result.integrity.conflicted_transfers.len(),
        result.integrity.cartel_flags.len()
    );
}

fn run_sweep(g: &GlobalArgs, fractions: &[f64]) -> CliResult {
    let config = load_config(g)?;
    let dir = out_dir(g, Some(&config));
    let result = sweep(&config, fractions)?;
    io::write_sweep(&result, &config, &dir)?;
    let mut failed = false;
    for p in &result.points {
        match (&p.gini, &p.error) {
            (Some(gini), _) => println!("f={:.3} gini={gini:.6}", p.fraction),
            (None, Some(e)) => {
                failed = true;
                println!("f={:.3} error: {e}", p.fraction)
            }
            _ => {}
        }
    }
    println!("outputs in {}", dir.display());
    Ok(if failed { EXIT_CONVERGENCE } else { 0 })
}

fn audit_inputs(g: &GlobalArgs, community: Option<&Path>) -> Result<(Community, CoiRules, CartelThresholds, i32), Failure> {
    match community {
        Some(path) => {
            let (rules, thresholds, year) = match g.config {
                Some(_) => {
                    let c = load_config(g)?;
                    (c.policy.coi_rules, c.policy.cartel_thresholds, c.policy.evaluation_year)
                }
                None => {
                    let p = sofa::policy::PolicyConfig::default();
                    (p.coi_rules, p.cartel_thresholds, p.evaluation_year)
                }
            };
            Ok((load_community(path)?, rules, thresholds, year))
        }
        None => {
            let config = load_config(g)?;
            let community = config.build_community()?;
            let p = config.policy;
            Ok((community, p.coi_rules, p.cartel_thresholds, p.evaluation_year))
        }
    }
}

fn run_audit(g: &GlobalArgs, transfers: &Path, community: Option<&Path>) -> CliResult {
    let (community, rules, thresholds, year) = audit_inputs(g, community)?;
    let ledger = io::read_transfers_csv(transfers, &community)?;
    let conflicts = detect_conflicts(&community, &rules, year);
    let report = audit(&community, &ledger, &conflicts, &thresholds)?;
    if let Some(dir) = &g.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| fail(EXIT_OTHER, format!("{}: {e}", dir.display())))?;
        io::write_integrity_report(&report, &dir.join(io::INTEGRITY_FILE))?;
    }
    println!(
        "{} transfers audited: {} conflicted, {} cartel flag(s)",
        report.totals.transfers, report.totals.conflicted_transfers, report.totals.cartel_flags
    );
    for note in &report.notes {
        println!("note: {note}");
    }
    for t in &report.conflicted_transfers {
        println!(
            "conflict: round {} {} -> {} ({})",
            t.round,
            t.donor_id,
            t.recipient_id,
            t.reasons.join(", ")
        );
    }
    for f in &report.cartel_flags {
        println!("cartel: {:?} [{}] score {:.3}", f.kind, f.members.join(", "), f.score);
    }
    Ok(if report.has_violations() { EXIT_INTEGRITY } else { 0 })
}

fn verify(g: &GlobalArgs) -> CliResult {
    let config = load_config(g)?;
    let scenario = Scenario::prepare(&config)?;
    let n = scenario.community.len();
    if n > DENSE_SOLVE_LIMIT {
        return Err(fail(
            EXIT_OTHER,
            format!("verify needs N <= {DENSE_SOLVE_LIMIT}, community has {n} agents"),
        ));
    }
    let plan = scenario.plan_for_round(
        1,
        VisibleState {
            totals: &scenario.base,
            round: 1,
        },
        &[],
        "plan",
    )?;
    let policy = &config.policy;
    let fp = run_fixed_point(&plan, &scenario.fractions, &scenario.base, policy.tolerance, policy.max_iter)?;
    if !fp.converged {
        return Err(Error::NotConverged {
            iterations: fp.iterations,
            residual: fp.final_residual(),
        }
        .into());
    }
    let exact = closed_form_totals(&plan, &scenario.fractions, &scenario.base)?;
    let budget: f64 = scenario.base.iter().sum();
    let gap = fp
        .totals
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let limit = 1e-8 * budget;
    let ok = gap <= limit;
    println!(
        "{}",
        json!({
            "agents": n,
            "iterations": fp.iterations,
            "final_residual": fp.final_residual(),
            "max_abs_difference": gap,
            "allowed": limit,
            "agree": ok,
        })
    );
    Ok(if ok { 0 } else { EXIT_OTHER })
}

fn report(g: &GlobalArgs, cost: Option<&Path>, community: Option<&Path>) -> CliResult {
    let mut out = serde_json::Map::new();
    if let Some(dir) = g.out_dir.as_deref().filter(|d| d.join(io::FUNDING_FILE).exists()) {
        out.insert("run".into(), run_report(g, dir, community)?);
    } else if cost.is_none() {
        return Err(fail(EXIT_OTHER, "nothing to report: pass --out-dir of a run and/or --cost"));
    }
    if let Some(path) = cost {
        let text = std::fs::read_to_string(path).map_err(|e| fail(EXIT_OTHER, format!("{}: {e}", path.display())))?;
        let cases: Vec<CostCase> =
            serde_json::from_str(&text).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
        let reports = cases
            .iter()
            .map(|c| {
                let r = cost_model(&c.params)?;
                Ok(json!({"name": c.name, "note": c.note, "report": r}))
            })
            .collect::<sofa::Result<Vec<_>>>()?;
        out.insert("cost".into(), reports.into());
    }
    println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
    Ok(0)
}

fn run_report(g: &GlobalArgs, dir: &Path, community: Option<&Path>) -> Result<serde_json::Value, Failure> {
    let mismatched = match io::read_manifest(dir) {
        Ok(manifest) => Some(manifest.mismatches(dir)),
        Err(Error::Io { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let rows = io::read_funding_csv(&dir.join(io::FUNDING_FILE))?;
    let Some(last) = rows.iter().map(|r| r.round).max() else {
        return Err(fail(EXIT_OTHER, "funding file has no rows"));
    };
    let final_rows: Vec<_> = rows.iter().filter(|r| r.round == last).collect();
    let community = match (community, &g.config) {
        (Some(path), _) => load_community(path)?,
        (None, Some(_)) => load_config(g)?.build_community()?,
        (None, None) => Community::new(
            final_rows.iter().map(|r| Agent::scientist(r.agent_id.clone(), "unknown")).collect(),
            vec![],
        )?,
    };
    let mut retained = vec![0.0; community.len()];
    for r in &final_rows {
        let pos = community
            .position_of(&r.agent_id)
            .ok_or_else(|| fail(EXIT_OTHER, format!("agent {} is not in the community", r.agent_id)))?;
        retained[pos] = r.retained;
    }
    let convergence = io::read_metrics(&dir.join(io::METRICS_FILE))
        .map(|m| m.convergence)
        .unwrap_or(ConvergenceSummary {
            iterations: 0,
            final_residual: 0.0,
            converged: false,
        });
    let metrics = metrics_report(&retained, &community, convergence)?;
    Ok(json!({
        "round": last,
        "manifest_ok": mismatched.as_ref().map(Vec::is_empty),
        "mismatched_files": mismatched,
        "metrics": metrics,
    }))
}
