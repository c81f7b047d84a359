//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sofa::integrity::{
    detect_cartels, detect_cartels_exhaustive, CartelKind, CartelThresholds, DonationLedger, DonationPools, Transfer,
};
use sofa::io;
use sofa::mechanism::{closed_form_totals, donation_step, run_fixed_point, AllocationPlan, FundingState};
use sofa::metrics::per_group_shares;
use sofa::population::{AgentId, CommunitySpec};
use sofa::simulation::{
    sweep, CartelPattern, CommunitySource, Mode, Revision, Scenario, ScenarioConfig, Strategy, StrategyAssignment,
    SuperNodeSpec,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sofa")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn criterion_1() -> Outcome {
    // Agent 0 holds the base 50,000 and receives 150,000 from agent 1.
    let plan = AllocationPlan::new(vec![vec![(1, 1.0)], vec![(0, 1.0)]]).map_err(|e| e.to_string())?;
    let fractions = [0.5, 0.5];
    let base = [50_000.0, 50_000.0];
    let prev = FundingState::from_totals(0, vec![0.0, 300_000.0], &fractions, &base).map_err(|e| e.to_string())?;
    let mut ledger = DonationLedger::default();
    let next = donation_step(&prev, &plan, &fractions, &base, &mut ledger).map_err(|e| e.to_string())?;
    let (t, d, r) = (next.incoming_total[0], next.donated_pool[0], next.retained[0]);
    check(
        t == 200_000.0 && d == 100_000.0 && r == 100_000.0,
        format!("received total {t}, donated {d}, retained {r}"),
    )
}

fn random_scenario(rng: &mut ChaCha8Rng, k: usize) -> ScenarioConfig {
    let n = 10f64.powf(rng.random_range(1.0..4.0)).round() as usize;
    let spec = CommunitySpec {
        n_affiliations: (n / rng.random_range(5..20)).max(2),
        n_domains: rng.random_range(1..=4usize).min(n),
        coauthor_mean_degree: rng.random_range(0.0..4.0),
        group_tag_proportions: BTreeMap::from([(
            "stage".to_string(),
            BTreeMap::from([("early".to_string(), 0.3), ("late".to_string(), 0.7)]),
        )]),
        ..CommunitySpec::new(n)
    };
    let mut config = ScenarioConfig::new(CommunitySource::Generate(spec));
    config.seed = k as u64;
    config.rounds = rng.random_range(1..=3);
    config.mode = [Mode::FixedPointPerRound, Mode::PerRoundStepping, Mode::TwoPhase][k % 3];
    config.revision = [Revision::Keep, Revision::FollowLeader, Revision::Repropose][k / 3 % 3];
    config.policy.public_fraction = if rng.random_bool(0.5) { 0.0 } else { 0.1 };
    config.policy.default_fraction = rng.random_range(0.0..0.9);
    config.policy.fraction_overrides = [("early".to_string(), rng.random_range(0.0..0.9))].into_iter().collect();
    config.policy.total_budget = rng.random_range(1e3..1e9);
    let strategies = [
        Strategy::UniformRandom { out_degree: rng.random_range(1..15) },
        Strategy::MeritProportional { out_degree: rng.random_range(1..15) },
        Strategy::Preferential { out_degree: rng.random_range(1..15), alpha: rng.random_range(0.0..2.0) },
    ];
    config.strategy = StrategyAssignment {
        default: strategies[k % 3].clone(),
        by_tag: [("early".to_string(), strategies[(k + 1) % 3].clone())].into_iter().collect(),
        ..StrategyAssignment::default()
    };
    config.super_nodes = (0..rng.random_range(0..=2))
        .map(|s| SuperNodeSpec { name: format!("facility-{s}"), domain_id: "domain-1".into() })
        .collect();
    config
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut rounds = 0;
    let started = Instant::now();
    for k in 0..120 {
        let config = random_scenario(&mut rng, k);
        let result = Scenario::prepare(&config).and_then(|s| s.run()).map_err(|e| format!("scenario {k}: {e}"))?;
        if let Some(f) = &result.failure {
            return Err(format!("scenario {k} did not converge: {f:?}"));
        }
        worst = worst.max(result.max_conservation_error());
        rounds += result.history.len();
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && secs < 60.0,
        format!("120 scenarios, {rounds} rounds, worst |sum R - B|/B = {worst:.2e}, {secs:.1}s"),
    )
}

fn random_plan(rng: &mut ChaCha8Rng, n: usize) -> AllocationPlan {
    let rows = (0..n)
        .map(|i| {
            let mut row = BTreeMap::new();
            let d = rng.random_range(1..=6usize).min(n - 1);
            while row.len() < d {
                let j = rng.random_range(0..n);
                if j != i {
                    row.insert(j, rng.random_range(0.05..1.0));
                }
            }
            row.into_iter().collect()
        })
        .collect();
    AllocationPlan::from_weights(rows).expect("valid plan")
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let n = rng.random_range(2..=200);
        let plan = random_plan(&mut rng, n);
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.95)).collect();
        let base: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..100.0)).collect();
        let budget: f64 = base.iter().sum();
        let fp = run_fixed_point(&plan, &f, &base, 1e-12, 100_000).map_err(|e| e.to_string())?;
        let exact = closed_form_totals(&plan, &f, &base).map_err(|e| e.to_string())?;
        let gap = fp.totals.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / budget;
        worst = worst.max(gap);
    }
    check(worst <= 1e-8, format!("60 instances, worst inf-norm gap / B = {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..60 {
        let n = rng.random_range(2..=150);
        let plan = random_plan(&mut rng, n);
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.95)).collect();
        let max_f = f.iter().copied().fold(0.0, f64::max);
        let base = vec![1.0; n];
        let fp = run_fixed_point(&plan, &f, &base, 1e-12, 100_000).map_err(|e| e.to_string())?;
        for w in fp.residual_history.windows(2) {
            if w[0] > 1e-13 {
                worst_excess = worst_excess.max(w[1] / w[0] - max_f);
            }
        }
    }
    let cycle = AllocationPlan::new(vec![vec![(1, 1.0)], vec![(2, 1.0)], vec![(0, 1.0)]]).map_err(|e| e.to_string())?;
    let a = run_fixed_point(&cycle, &[0.5; 3], &[1.0; 3], 1e-6, 1000).map_err(|e| e.to_string())?;
    check(
        worst_excess <= 0.01 && (20..=22).contains(&a.iterations) && a.converged,
        format!(
            "max(ratio - max f) = {worst_excess:.2e}; example A converged in {} iterations",
            a.iterations
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut config = ScenarioConfig::new(CommunitySource::Generate(CommunitySpec {
        n_affiliations: 300,
        ..CommunitySpec::new(300)
    }));
    config.policy.default_fraction = 0.0;
    let zero = Scenario::prepare(&config).and_then(|s| s.run()).map_err(|e| e.to_string())?;
    let g0 = zero.metrics.as_ref().map(|m| m.gini).unwrap_or(f64::NAN);
    config.rounds = 3;
    config.strategy = StrategyAssignment::global(Strategy::Preferential { out_degree: 10, alpha: 1.0 });
    let grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let mut violations = Vec::new();
    for seed in 0..20 {
        config.seed = seed;
        let out = sweep(&config, &grid).map_err(|e| e.to_string())?;
        let curve: Vec<f64> = out.points.iter().map(|p| p.gini.unwrap_or(f64::NAN)).collect();
        if curve.windows(2).any(|w| w[1].is_nan() || w[1] < w[0]) {
            violations.push(seed);
        }
    }
    check(
        g0 == 0.0 && violations.is_empty(),
        format!("gini at f=0: {g0}; non-monotone seeds out of 20: {violations:?}"),
    )
}

fn write_config(dir: &Path, config: &ScenarioConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn criterion_6() -> Outcome {
    let mut conflicted = 0;
    let mut transfers = 0;
    for seed in 0..20 {
        let mut config = ScenarioConfig::new(CommunitySource::Generate(CommunitySpec {
            n_affiliations: 30,
            coauthor_mean_degree: 6.0,
            ..CommunitySpec::new(300)
        }));
        config.seed = seed;
        config.rounds = 2;
        let result = Scenario::prepare(&config).and_then(|s| s.run()).map_err(|e| e.to_string())?;
        conflicted += result.integrity.conflicted_transfers.len();
        transfers += result.ledger.len();
    }
    // Plant one conflicted transfer in a stored ledger and audit it.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = ScenarioConfig::new(CommunitySource::Generate(CommunitySpec {
        n_affiliations: 50,
        coauthor_mean_degree: 3.0,
        ..CommunitySpec::new(100)
    }));
    config.rounds = 2;
    config.seed = 6;
    let cfg = write_config(tmp.path(), &config);
    let run = tmp.path().join("run");
    let status = Command::new(bin()).args(["run", "--config"]).arg(&cfg).arg("--out-dir").arg(&run).output().unwrap();
    if !status.status.success() {
        return Err(format!("run failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    let audit = |file: &Path| {
        Command::new(bin()).args(["audit", "--config"]).arg(&cfg).arg("--transfers").arg(file).output().unwrap()
    };
    let clean = audit(&run.join(io::TRANSFERS_FILE)).status.code();
    let community = config.build_community().map_err(|e| e.to_string())?;
    let edge = community.coauthor_edges().iter().find(|e| 2024 - e.last_year <= 5).ok_or("no recent coauthors")?;
    let mut text = fs::read_to_string(run.join(io::TRANSFERS_FILE)).unwrap();
    text.push_str(&format!("1,{},{},10.000000000\n", community.id(edge.a), community.id(edge.b)));
    let planted = tmp.path().join("planted.csv");
    fs::write(&planted, text).unwrap();
    let dirty = audit(&planted).status.code();
    check(
        conflicted == 0 && clean == Some(0) && dirty == Some(4),
        format!(
            "{transfers} transfers over 20 runs, {conflicted} conflicted; audit exit clean={clean:?} planted={dirty:?}"
        ),
    )
}

fn random_ledger(rng: &mut ChaCha8Rng, n: usize) -> DonationLedger {
    let plans: Vec<AllocationPlan> = (0..2).map(|_| random_plan(rng, n)).collect();
    let mut ledger = DonationLedger::default();
    for round in 1..=4 {
        let plan = &plans[usize::from(rng.random_bool(0.3))];
        for (donor, row) in plan.rows().iter().enumerate() {
            let pool: f64 = rng.random_range(0.5..2.0);
            for &(recipient, w) in row {
                ledger.push(Transfer { round, donor, recipient, amount: w * pool });
            }
        }
    }
    ledger
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let (mut tp, mut fp, mut missed) = (0, 0, 0);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let n = 80;
        let size = rng.random_range(2..=5);
        let mut ids: Vec<usize> = (1..=n).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let mut members: Vec<String> = ids[..size].iter().map(|i| format!("agent-{i:02}")).collect();
        let strategy = Strategy::Cartel {
            members: members.iter().map(|m| AgentId::new(m.as_str())).collect(),
            internal_share: 0.8,
            out_degree: 10,
            pattern: if seed % 2 == 0 { CartelPattern::Ring } else { CartelPattern::Clique },
        };
        let mut config = ScenarioConfig::new(CommunitySource::Generate(CommunitySpec {
            n_affiliations: n,
            ..CommunitySpec::new(n)
        }));
        config.seed = seed;
        config.rounds = 3;
        config.strategy = StrategyAssignment {
            by_agent: members.iter().map(|m| (AgentId::new(m.as_str()), strategy.clone())).collect(),
            ..StrategyAssignment::default()
        };
        let result = Scenario::prepare(&config).and_then(|s| s.run()).map_err(|e| e.to_string())?;
        members.sort();
        let flagged: BTreeSet<Vec<String>> = result.integrity.cartel_flags.iter().map(|f| f.members.clone()).collect();
        if flagged.contains(&members) {
            tp += 1;
        } else {
            missed += 1;
        }
        fp += flagged.iter().filter(|f| **f != members).count();
    }
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let recall = tp as f64 / (tp + missed) as f64;

    let mut mismatches = 0;
    let mut compared = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..40 {
        let n = rng.random_range(4..=30);
        let ledger = random_ledger(&mut rng, n);
        for k in 2..=4 {
            let th = CartelThresholds {
                internal_share: rng.random_range(0.5..0.9),
                max_group_size: k,
                min_rounds: rng.random_range(1..=3),
                ..CartelThresholds::default()
            };
            let pools = DonationPools::from_ledger(&ledger, n);
            let mut fast: Vec<(CartelKind, Vec<usize>)> = detect_cartels(&ledger, &pools, &th)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|f| (f.kind, f.members))
                .collect();
            let mut slow = detect_cartels_exhaustive(&ledger, n, &th).map_err(|e| e.to_string())?;
            fast.sort();
            slow.sort();
            compared += 1;
            mismatches += usize::from(fast != slow);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        precision == 1.0 && recall == 1.0 && mismatches == 0 && secs < 120.0,
        format!(
            "planted: precision {precision}, recall {recall} over 50 seeds; oracle mismatches {mismatches}/{compared}; {secs:.1}s"
        ),
    )
}

fn criterion_8() -> Outcome {
    let spec = CommunitySpec {
        n_affiliations: 400,
        group_tag_proportions: BTreeMap::from([(
            "gender".to_string(),
            BTreeMap::from([("female".to_string(), 0.4), ("male".to_string(), 0.6)]),
        )]),
        ..CommunitySpec::new(400)
    };
    let mut shares = Vec::new();
    let mut worst: f64 = 0.0;
    for m in [0.5, 1.0, 2.0, 4.0] {
        let mut config = ScenarioConfig::new(CommunitySource::Generate(spec.clone()));
        config.seed = 8;
        config.policy.group_multipliers = BTreeMap::from([("female".to_string(), m)]);
        let result = Scenario::prepare(&config).and_then(|s| s.run()).map_err(|e| e.to_string())?;
        let state = result.final_state().ok_or("no rounds")?;
        let by_tag = per_group_shares(&state.retained, &result.community).map_err(|e| e.to_string())?;
        shares.push(by_tag["female"]);
        worst = worst.max(result.max_conservation_error());
    }
    check(
        shares.windows(2).all(|w| w[1] > w[0]) && worst <= 1e-9,
        format!("female share of retained for m = 0.5, 1, 2, 4: {shares:.4?}; worst conservation error {worst:.1e}"),
    )
}

fn criterion_9() -> Outcome {
    let out = Command::new(bin())
        .args(["report", "--cost"])
        .arg(configs_dir().join("cost_paper_figures.json"))
        .output()
        .unwrap();
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let cases = v["cost"].as_array().ok_or("no cost section")?;
    let find = |name: &str| cases.iter().find(|c| c["name"] == name).map(|c| &c["report"]);
    let nserc = find("nserc-application-vs-baseline").ok_or("missing NSERC case")?;
    let horizon = find("horizon-2020-unsuccessful-time").ok_or("missing Horizon case")?;
    let cost = nserc["cost_per_application"].as_f64().unwrap_or(0.0);
    let grant = nserc["baseline_grant"].as_f64().unwrap_or(0.0);
    let exceeds = nserc["application_cost_exceeds_baseline"].as_bool() == Some(true);
    let ratio = horizon["overhead_ratio"].as_f64().unwrap_or(f64::NAN);
    check(
        exceeds && cost == 40_000.0 && grant == 30_000.0 && (ratio - 1.4 / 5.5).abs() <= 1e-12,
        format!("application {cost} > grant {grant}: {exceeds}; overhead ratio {ratio:.12}"),
    )
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = configs_dir().join("example.json");
    let mut dirs = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("run-{k}"));
        let out = Command::new(bin())
            .env("SOURCE_DATE_EPOCH", "1700000000")
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(&dir)
            .output()
            .unwrap();
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        dirs.push(dir);
    }
    let names: BTreeSet<String> = fs::read_dir(&dirs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let identical = names.len() == 5 && names.iter().all(|n| fs::read(dirs[0].join(n)).ok() == fs::read(dirs[1].join(n)).ok());

    let mut config = ScenarioConfig::new(CommunitySource::Generate(CommunitySpec {
        n_affiliations: 10_000,
        coauthor_mean_degree: 2.0,
        ..CommunitySpec::new(100_000)
    }));
    config.policy.tolerance = 1e-6;
    config.strategy = StrategyAssignment::global(Strategy::UniformRandom { out_degree: 10 });
    let community = config.build_community().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let result = Scenario::with_community(&config, community).and_then(|s| s.run()).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let fp = &result.fixed_points[0];
    check(
        identical && fp.converged && secs < 5.0,
        format!(
            "{} files byte-identical across runs: {identical}; N=100000 d=10 converged in {} iterations, {secs:.2}s",
            names.len(),
            fp.iterations
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("worked example", criterion_1),
        ("conservation", criterion_2),
        ("oracle equivalence", criterion_3),
        ("geometric convergence", criterion_4),
        ("egalitarian limit", criterion_5),
        ("coi enforcement", criterion_6),
        ("cartel detection", criterion_7),
        ("bias lever", criterion_8),
        ("cost model", criterion_9),
        ("determinism and scale", criterion_10),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("acceptance {:>2} {name}: PASS ({detail})", k + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {:>2} {name}: FAIL ({detail})", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
