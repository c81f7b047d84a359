//! Donor strategies, scenario execution and donation-fraction sweeps.
//!
//! A scenario runs `rounds` funding rounds. Each round every scientist
//! proposes a donation plan from public information only (the previous
//! round's published totals), the policy levers and conflict masking are
//! applied, and the round is settled in one of three ways:
//!
//! * `per_round_stepping`: a single donation step from the previous totals;
//! * `fixed_point_per_round`: the plans are frozen and iterated to the
//!   stationary distribution;
//! * `two_phase`: a fixed point, publication of the interim totals, revised
//!   plans, and a second fixed point.
//!
//! All randomness comes from per-agent, per-round streams keyed by agent id,
//! so results do not depend on iteration order or thread count.

use std::collections::BTreeMap;
use std::path::PathBuf;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::integrity::{
    apply_penalties, audit, detect_cartels, detect_conflicts, mask_plan_with_fallback, CartelFlag,
    ConflictSet, DonationLedger, DonationPools, IntegrityReport, Transfer,
};
use crate::mechanism::{
    donation_step, run_fixed_point, two_phase_round, AllocationPlan, FixedPointResult, FundingState,
    PlanRevision, PlanRow,
};
use crate::metrics::{metrics_report, ConvergenceSummary, MetricsReport};
use crate::policy::{
    apply_group_multiplier, attach_super_node, base_vector, partition_budgets, predicate_plan,
    public_weights, resolve_fractions, PolicyConfig, Predicate,
};
use crate::population::{generate_community, load_community, AgentId, Community, CommunitySpec};
use crate::rng;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_OUT_DEGREE: usize = 10;

fn default_out_degree() -> usize {
    DEFAULT_OUT_DEGREE
}

fn default_alpha() -> f64 {
    1.0
}

fn default_internal_share() -> f64 {
    0.9
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartelPattern {
    /// Each member passes the internal share to the next member in list order.
    Ring,
    /// Each member splits the internal share over all other members.
    #[default]
    Clique,
}

/// How a donor picks recipients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// `out_degree` distinct recipients drawn uniformly, equal weights.
    UniformRandom {
        #[serde(default = "default_out_degree")]
        out_degree: usize,
    },
    /// Recipients drawn and weighted in proportion to merit.
    MeritProportional {
        #[serde(default = "default_out_degree")]
        out_degree: usize,
    },
    /// Recipients drawn and weighted in proportion to `T^alpha` of the last
    /// published totals.
    Preferential {
        #[serde(default = "default_out_degree")]
        out_degree: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// Even split over everyone a predicate selects.
    Predicate { predicate: Predicate },
    /// Members route `internal_share` of their pool to each other and spread
    /// the rest uniformly outside the group. Non-members act uniformly.
    Cartel {
        members: Vec<AgentId>,
        #[serde(default = "default_internal_share")]
        internal_share: f64,
        #[serde(default = "default_out_degree")]
        out_degree: usize,
        #[serde(default)]
        pattern: CartelPattern,
    },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::UniformRandom {
            out_degree: DEFAULT_OUT_DEGREE,
        }
    }
}

impl Strategy {
    fn issues(&self, at: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let degree = |d: usize, out: &mut Vec<ConfigIssue>| {
            if d == 0 {
                out.push(ConfigIssue::new(format!("{at}/out_degree"), "must be >= 1"));
            }
        };
        match self {
            Strategy::UniformRandom { out_degree } | Strategy::MeritProportional { out_degree } => {
                degree(*out_degree, &mut out)
            }
            Strategy::Preferential { out_degree, alpha } => {
                degree(*out_degree, &mut out);
                if !(alpha.is_finite() && *alpha >= 0.0) {
                    out.push(ConfigIssue::new(format!("{at}/alpha"), "must be >= 0"));
                }
            }
            Strategy::Predicate { .. } => {}
            Strategy::Cartel {
                members,
                internal_share,
                out_degree,
                ..
            } => {
                degree(*out_degree, &mut out);
                if members.len() < 2 {
                    out.push(ConfigIssue::new(format!("{at}/members"), "needs at least two members"));
                }
                if !(*internal_share > 0.0 && *internal_share <= 1.0) {
                    out.push(ConfigIssue::new(format!("{at}/internal_share"), "must be in (0, 1]"));
                }
            }
        }
        out
    }

    fn alpha(&self) -> Option<f64> {
        match self {
            Strategy::Preferential { alpha, .. } => Some(*alpha),
            _ => None,
        }
    }
}

/// Which strategy each agent follows: per-agent entries first, then the
/// first matching tag in declared order, then the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyAssignment {
    pub default: Strategy,
    pub by_tag: IndexMap<String, Strategy>,
    pub by_agent: BTreeMap<AgentId, Strategy>,
}

impl StrategyAssignment {
    pub fn global(strategy: Strategy) -> Self {
        StrategyAssignment {
            default: strategy,
            ..StrategyAssignment::default()
        }
    }

    pub fn strategy_for(&self, community: &Community, agent: usize) -> &Strategy {
        let a = community.agent(agent);
        if let Some(s) = self.by_agent.get(&a.id) {
            return s;
        }
        self.by_tag
            .iter()
            .find(|(tag, _)| a.group_tags.contains(*tag))
            .map(|(_, s)| s)
            .unwrap_or(&self.default)
    }

    fn all(&self) -> impl Iterator<Item = &Strategy> {
        std::iter::once(&self.default)
            .chain(self.by_tag.values())
            .chain(self.by_agent.values())
    }
}

/// Plan rewrite applied after interim totals are published (two-phase mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Revision {
    #[default]
    Keep,
    /// Everyone gives everything to the best-funded eligible agent; ties go
    /// to the lowest id.
    FollowLeader,
    /// Strategies run again with the interim totals visible.
    Repropose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PerRoundStepping,
    #[default]
    FixedPointPerRound,
    TwoPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommunitySource {
    Generate(CommunitySpec),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperNodeSpec {
    pub name: String,
    pub domain_id: String,
}

/// A complete, self-contained scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "config_schema_version")]
    pub schema_version: u32,
    pub community: CommunitySource,
    #[serde(default)]
    pub super_nodes: Vec<SuperNodeSpec>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub strategy: StrategyAssignment,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub revision: Revision,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn config_schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

fn default_rounds() -> usize {
    1
}

impl ScenarioConfig {
    pub fn new(community: CommunitySource) -> Self {
        ScenarioConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            community,
            super_nodes: Vec::new(),
            policy: PolicyConfig::default(),
            strategy: StrategyAssignment::default(),
            rounds: 1,
            mode: Mode::default(),
            revision: Revision::default(),
            seed: 0,
            output_dir: None,
        }
    }

    /// Every static problem with the config.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            out.push(ConfigIssue::new(
                "/schema_version",
                format!("unsupported version {}, expected {CONFIG_SCHEMA_VERSION}", self.schema_version),
            ));
        }
        match &self.community {
            CommunitySource::Generate(spec) => out.extend(spec.issues("/community/generate")),
            CommunitySource::File(path) => {
                if !path.is_file() {
                    out.push(ConfigIssue::new(
                        "/community/file",
                        format!("{} does not exist", path.display()),
                    ));
                }
            }
        }
        out.extend(self.policy.issues("/policy"));
        out.extend(self.strategy.default.issues("/strategy/default"));
        for (tag, s) in &self.strategy.by_tag {
            out.extend(s.issues(&format!("/strategy/by_tag/{tag}")));
        }
        for (id, s) in &self.strategy.by_agent {
            out.extend(s.issues(&format!("/strategy/by_agent/{id}")));
        }
        if self.rounds == 0 {
            out.push(ConfigIssue::new("/rounds", "must be >= 1"));
        }
        out
    }

    fn check(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Builds or loads the community and attaches configured super-nodes.
    pub fn build_community(&self) -> Result<Community> {
        let mut community = match &self.community {
            CommunitySource::Generate(spec) => generate_community(spec, self.seed)?,
            CommunitySource::File(path) => load_community(path)?,
        };
        for node in &self.super_nodes {
            community = attach_super_node(&community, &node.name, &node.domain_id)?;
        }
        Ok(community)
    }
}

/// What a donor may look at when choosing: the last published totals.
#[derive(Debug, Clone, Copy)]
pub struct VisibleState<'a> {
    pub totals: &'a [f64],
    pub round: usize,
}

/// Cumulative weights for drawing recipients with replacement.
struct WeightTable {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl WeightTable {
    fn new(weights: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        WeightTable { weights, cumulative }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        let total = *self.cumulative.last()?;
        if total.is_nan() || total <= 0.0 {
            return None;
        }
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u);
        Some(k.min(self.weights.len() - 1))
    }
}

/// Picks up to `d` distinct recipients, drawing in proportion to the table
/// weights and weighting the row the same way.
fn weighted_row(
    donor: usize,
    d: usize,
    table: &WeightTable,
    allowed: &dyn Fn(usize) -> bool,
    conflict_count: usize,
    rng: &mut ChaCha8Rng,
) -> PlanRow {
    let n = table.weights.len();
    let eligible = |j: usize| j != donor && table.weights[j] > 0.0 && allowed(j);
    let mut chosen: Vec<usize> = Vec::with_capacity(d);
    if n.saturating_sub(1 + conflict_count) > d {
        let budget = 20 * d + 50;
        for _ in 0..budget {
            if chosen.len() == d {
                break;
            }
            match table.draw(rng) {
                Some(j) if eligible(j) && !chosen.contains(&j) => chosen.push(j),
                Some(_) => {}
                None => break,
            }
        }
    }
    if chosen.len() < d {
        // Exact weighted sampling without replacement (exponential keys).
        let mut keyed: Vec<(f64, usize)> = (0..n)
            .filter(|&j| eligible(j))
            .map(|j| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (u.ln() / table.weights[j], j)
            })
            .collect();
        if keyed.len() > d {
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            keyed.truncate(d);
        }
        chosen = keyed.into_iter().map(|(_, j)| j).collect();
    }
    crate::mechanism::normalize_row(chosen.into_iter().map(|j| (j, table.weights[j])).collect())
}

/// Per-round proposal context.
struct Proposer<'a> {
    community: &'a Community,
    conflicts: &'a ConflictSet,
    evaluation_year: i32,
    seed: u64,
    round: usize,
    uniform: WeightTable,
    merit: WeightTable,
    preferential: Vec<(f64, WeightTable)>,
    conflict_counts: Vec<usize>,
}

impl<'a> Proposer<'a> {
    fn new(
        community: &'a Community,
        conflicts: &'a ConflictSet,
        strategies: impl Iterator<Item = &'a Strategy>,
        visible: VisibleState<'_>,
        evaluation_year: i32,
        seed: u64,
    ) -> Self {
        let mut alphas: Vec<f64> = strategies.filter_map(Strategy::alpha).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        let preferential = alphas
            .into_iter()
            .map(|alpha| {
                let w = visible
                    .totals
                    .iter()
                    .map(|&t| if t > 0.0 { t.powf(alpha) } else { 0.0 })
                    .collect();
                (alpha, WeightTable::new(w))
            })
            .collect();
        Proposer {
            community,
            conflicts,
            evaluation_year,
            seed,
            round: visible.round,
            uniform: WeightTable::new(vec![1.0; community.len()]),
            merit: WeightTable::new(
                community
                    .agents()
                    .iter()
                    .map(|a| if a.is_scientist() { a.merit } else { 0.0 })
                    .collect(),
            ),
            preferential,
            conflict_counts: (0..community.len()).map(|i| conflicts.conflict_bound(i)).collect(),
        }
    }

    fn row(&self, donor: usize, strategy: &Strategy) -> Result<PlanRow> {
        let agent = self.community.agent(donor);
        if agent.is_super_node() {
            return Ok(Vec::new());
        }
        let mut rng = rng::stream(self.seed, "plan", agent.id.as_str(), self.round as u64);
        let not_conflicted = |j: usize| !self.conflicts.contains(donor, j);
        let conflicts = self.conflict_counts[donor];
        let row = match strategy {
            Strategy::UniformRandom { out_degree } => {
                weighted_row(donor, *out_degree, &self.uniform, &not_conflicted, conflicts, &mut rng)
            }
            Strategy::MeritProportional { out_degree } => {
                weighted_row(donor, *out_degree, &self.merit, &not_conflicted, conflicts, &mut rng)
            }
            Strategy::Preferential { out_degree, alpha } => {
                let table = &self
                    .preferential
                    .iter()
                    .find(|(a, _)| a == alpha)
                    .expect("table built for every alpha")
                    .1;
                weighted_row(donor, *out_degree, table, &not_conflicted, conflicts, &mut rng)
            }
            Strategy::Predicate { predicate } => {
                predicate_plan(donor, predicate, self.community, self.conflicts, self.evaluation_year)?
            }
            Strategy::Cartel {
                members,
                internal_share,
                out_degree,
                pattern,
            } => {
                let positions: Vec<usize> = members
                    .iter()
                    .filter_map(|id| self.community.position(id))
                    .collect();
                let Some(slot) = positions.iter().position(|&p| p == donor) else {
                    return Ok(weighted_row(
                        donor,
                        *out_degree,
                        &self.uniform,
                        &not_conflicted,
                        conflicts,
                        &mut rng,
                    ));
                };
                let internal: Vec<usize> = match pattern {
                    CartelPattern::Ring => vec![positions[(slot + 1) % positions.len()]],
                    CartelPattern::Clique => positions.iter().copied().filter(|&p| p != donor).collect(),
                }
                .into_iter()
                .filter(|&j| not_conflicted(j))
                .collect();
                let outside = |j: usize| not_conflicted(j) && !positions.contains(&j);
                let external = weighted_row(
                    donor,
                    *out_degree,
                    &self.uniform,
                    &outside,
                    conflicts + positions.len(),
                    &mut rng,
                );
                let inner_share = match (internal.is_empty(), external.is_empty()) {
                    (true, _) => 0.0,
                    (false, true) => 1.0,
                    (false, false) => *internal_share,
                };
                let mut row: Vec<(usize, f64)> = internal
                    .iter()
                    .map(|&j| (j, inner_share / internal.len() as f64))
                    .collect();
                row.extend(external.into_iter().map(|(j, w)| (j, w * (1.0 - inner_share))));
                crate::mechanism::normalize_row(row)
            }
        };
        Ok(row)
    }
}

/// One strategy for every scientist.
pub fn propose_plans(
    strategy: &Strategy,
    community: &Community,
    visible: VisibleState<'_>,
    conflicts: &ConflictSet,
    seed: u64,
) -> Result<AllocationPlan> {
    let assignment = StrategyAssignment::global(strategy.clone());
    propose_assigned(&assignment, community, visible, conflicts, 2024, seed)
}

/// Plans under a strategy assignment. Rows never include the donor or a
/// conflicted recipient and are normalized.
pub fn propose_assigned(
    assignment: &StrategyAssignment,
    community: &Community,
    visible: VisibleState<'_>,
    conflicts: &ConflictSet,
    evaluation_year: i32,
    seed: u64,
) -> Result<AllocationPlan> {
    if visible.totals.len() != community.len() {
        return Err(Error::Dimension(format!(
            "visible totals have length {}, community has {} agents",
            visible.totals.len(),
            community.len()
        )));
    }
    if let Some(i) = visible.totals.iter().position(|t| t.is_nan() || *t < 0.0) {
        return Err(Error::validation(
            "visible totals must be nonnegative",
            vec![community.id(i).to_string()],
        ));
    }
    let proposer = Proposer::new(community, conflicts, assignment.all(), visible, evaluation_year, seed);
    let rows = (0..community.len())
        .into_par_iter()
        .map(|donor| {
            let row = proposer.row(donor, assignment.strategy_for(community, donor))?;
            if row.is_empty() && community.agent(donor).is_scientist() {
                return Err(Error::EmptyRow {
                    donor: community.id(donor).to_string(),
                });
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    AllocationPlan::new(rows)
}

/// Revision rule bound to a scenario's context.
struct Reviser<'a> {
    kind: Revision,
    scenario: &'a Scenario,
    round: usize,
}

impl PlanRevision for Reviser<'_> {
    fn revise(&self, community: &Community, interim: &[f64], phase1: &AllocationPlan) -> Result<AllocationPlan> {
        match self.kind {
            Revision::Keep => Ok(phase1.clone()),
            Revision::Repropose => self.scenario.plan_for_round(
                self.round,
                VisibleState {
                    totals: interim,
                    round: self.round,
                },
                &[],
                "revision",
            ),
            Revision::FollowLeader => {
                let order = community.order_by_id();
                let rows = (0..community.len())
                    .map(|donor| {
                        if community.agent(donor).is_super_node() {
                            return Ok(Vec::new());
                        }
                        let mut best: Option<usize> = None;
                        for &j in &order {
                            if j == donor || self.scenario.conflicts.contains(donor, j) {
                                continue;
                            }
                            if best.is_none_or(|b| interim[j] > interim[b]) {
                                best = Some(j);
                            }
                        }
                        best.map(|j| vec![(j, 1.0)]).ok_or_else(|| Error::EmptyRow {
                            donor: community.id(donor).to_string(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                AllocationPlan::new(rows)
            }
        }
    }
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFailure {
    pub round: usize,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub community: Community,
    pub fractions: Vec<f64>,
    pub base: Vec<f64>,
    /// One state per completed round, rounds numbered from 1.
    pub history: Vec<FundingState>,
    /// Donations received in each round, under that round's index.
    pub ledger: DonationLedger,
    /// Settled fixed point per round (empty when stepping).
    pub fixed_points: Vec<FixedPointResult>,
    /// Interim fixed point per round in two-phase mode.
    pub interim: Vec<FixedPointResult>,
    pub metrics: Option<MetricsReport>,
    pub integrity: IntegrityReport,
    pub failure: Option<ConvergenceFailure>,
    pub mode: Mode,
}

impl ScenarioResult {
    pub fn budget(&self) -> f64 {
        self.base.iter().sum()
    }

    /// Largest per-round violation of money conservation, relative to the
    /// budget. At a fixed point retained funds add up to the budget; when
    /// stepping, donations in flight are accounted for:
    /// `ΣR_t + ΣD_t = B + Σ(received in t)`.
    pub fn max_conservation_error(&self) -> f64 {
        let budget = self.budget();
        let mut received: BTreeMap<usize, f64> = BTreeMap::new();
        for t in self.ledger.records() {
            *received.entry(t.round).or_insert(0.0) += t.amount;
        }
        self.history
            .iter()
            .map(|s| {
                let gap = match self.mode {
                    Mode::PerRoundStepping => {
                        s.retained_sum() + s.donated_sum()
                            - budget
                            - received.get(&s.round_index).copied().unwrap_or(0.0)
                    }
                    _ => s.retained_sum() - budget,
                };
                gap.abs() / budget
            })
            .fold(0.0, f64::max)
    }

    pub fn final_state(&self) -> Option<&FundingState> {
        self.history.last()
    }
}

/// A scenario with its community and policy vectors resolved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub community: Community,
    pub fractions: Vec<f64>,
    pub base: Vec<f64>,
    pub conflicts: ConflictSet,
}

impl Scenario {
    pub fn prepare(config: &ScenarioConfig) -> Result<Scenario> {
        config.check()?;
        let community = config.build_community()?;
        Scenario::with_community(config, community)
    }

    /// Uses an already built community; the config's source is ignored.
    pub fn with_community(config: &ScenarioConfig, community: Community) -> Result<Scenario> {
        let mut issues = config.policy.issues("/policy");
        if config.rounds == 0 {
            issues.push(ConfigIssue::new("/rounds", "must be >= 1"));
        }
        for strategy in config.strategy.all() {
            if let Strategy::Cartel { members, .. } = strategy {
                for id in members {
                    if community.position(id).is_none() {
                        issues.push(ConfigIssue::new("/strategy", format!("cartel member {id} not in community")));
                    }
                }
            }
        }
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        let policy = &config.policy;
        let fractions = resolve_fractions(&community, policy)?;
        let q = public_weights(&community, &policy.public_pref)?;
        let base = base_vector(policy.total_budget, &community, policy.public_fraction, &q)?;
        let conflicts = detect_conflicts(&community, &policy.coi_rules, policy.evaluation_year);
        Ok(Scenario {
            config: config.clone(),
            community,
            fractions,
            base,
            conflicts,
        })
    }

    /// Proposed, reweighted, masked and penalized plan for a round.
    pub fn plan_for_round(
        &self,
        round: usize,
        visible: VisibleState<'_>,
        flags: &[CartelFlag],
        stream: &str,
    ) -> Result<AllocationPlan> {
        let policy = &self.config.policy;
        let seed = rng::stream(self.config.seed, stream, "", 0).random::<u64>();
        let proposed = propose_assigned(
            &self.config.strategy,
            &self.community,
            VisibleState {
                totals: visible.totals,
                round,
            },
            &self.conflicts,
            policy.evaluation_year,
            seed,
        )?;
        let weighted = apply_group_multiplier(&proposed, &self.community, &policy.group_multipliers)?;
        let masked = mask_plan_with_fallback(
            &weighted,
            &self.conflicts,
            &self.community,
            policy.coi_rules.fallback_uniform_domain,
        )?;
        match (policy.penalty_policy, flags.is_empty()) {
            (Some(penalty), false) => apply_penalties(&masked, flags, penalty).map_err(|e| match e {
                Error::EmptyRow { donor } => Error::EmptyRow {
                    donor: donor
                        .strip_prefix('#')
                        .and_then(|i| i.parse::<usize>().ok())
                        .map(|i| self.community.id(i).to_string())
                        .unwrap_or(donor),
                },
                other => other,
            }),
            _ => Ok(masked),
        }
    }

    pub fn run(&self) -> Result<ScenarioResult> {
        let policy = &self.config.policy;
        let n = self.community.len();
        let budget: f64 = self.base.iter().sum();
        let mut history: Vec<FundingState> = Vec::with_capacity(self.config.rounds);
        let mut ledger = DonationLedger::default();
        let mut fixed_points = Vec::new();
        let mut interim = Vec::new();
        let mut failure = None;
        let mut flags: Vec<CartelFlag> = Vec::new();
        let mut previous = FundingState::initial(&self.base, &self.fractions)?;

        for round in 1..=self.config.rounds {
            if policy.penalty_policy.is_some() && ledger.rounds().len() >= policy.cartel_thresholds.min_rounds {
                let pools = DonationPools::from_ledger(&ledger, n);
                flags = detect_cartels(&ledger, &pools, &policy.cartel_thresholds)?;
            }
            let visible = VisibleState {
                totals: &previous.incoming_total,
                round,
            };
            let plan = self.plan_for_round(round, visible, &flags, "plan")?;

            let state = match self.config.mode {
                Mode::PerRoundStepping => {
                    let mut prev = previous.clone();
                    prev.round_index = round - 1;
                    donation_step(&prev, &plan, &self.fractions, &self.base, &mut ledger)?
                }
                Mode::FixedPointPerRound | Mode::TwoPhase => {
                    let (settled, used_plan) = if self.config.mode == Mode::TwoPhase {
                        let reviser = Reviser {
                            kind: self.config.revision,
                            scenario: self,
                            round,
                        };
                        match two_phase_round(
                            &self.community,
                            &plan,
                            &reviser,
                            &self.fractions,
                            &self.base,
                            policy.tolerance,
                            policy.max_iter,
                        ) {
                            Ok(out) => {
                                interim.push(out.interim);
                                (out.final_result, out.phase2_plan)
                            }
                            Err(Error::NotConverged { iterations, residual }) => {
                                failure = Some(ConvergenceFailure {
                                    round,
                                    iterations,
                                    residual,
                                });
                                break;
                            }
                            Err(e) => return Err(e),
                        }
                    } else {
                        let fp = run_fixed_point(
                            &plan,
                            &self.fractions,
                            &self.base,
                            policy.tolerance,
                            policy.max_iter,
                        )?;
                        if !fp.converged {
                            failure = Some(ConvergenceFailure {
                                round,
                                iterations: fp.iterations,
                                residual: fp.final_residual(),
                            });
                            break;
                        }
                        (fp, plan)
                    };
                    record_stationary_transfers(round, &used_plan, &self.fractions, &settled.totals, &mut ledger);
                    let state = settled.to_state(round, &self.fractions, &self.base)?;
                    fixed_points.push(settled);
                    state
                }
            };
            previous = state.clone();
            history.push(state);
        }

        let convergence = match (self.config.mode, fixed_points.last()) {
            (Mode::PerRoundStepping, _) => {
                let last = history.last();
                let before = history.len().checked_sub(2).map(|k| &history[k].incoming_total);
                let residual = match (last, before) {
                    (Some(s), Some(b)) => {
                        s.incoming_total.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / budget
                    }
                    (Some(s), None) => {
                        s.incoming_total.iter().zip(&self.base).map(|(x, y)| (x - y).abs()).sum::<f64>() / budget
                    }
                    _ => 0.0,
                };
                ConvergenceSummary {
                    iterations: history.len(),
                    final_residual: residual,
                    converged: residual <= policy.tolerance,
                }
            }
            (_, Some(fp)) => ConvergenceSummary {
                iterations: fp.iterations,
                final_residual: fp.final_residual(),
                converged: fp.converged,
            },
            (_, None) => ConvergenceSummary {
                iterations: failure.as_ref().map_or(0, |f| f.iterations),
                final_residual: failure.as_ref().map_or(0.0, |f| f.residual),
                converged: false,
            },
        };
        let metrics = match history.last() {
            Some(s) => Some(metrics_report(&s.retained, &self.community, convergence)?),
            None => None,
        };
        let integrity = audit(&self.community, &ledger, &self.conflicts, &policy.cartel_thresholds)?;
        ledger.sort_canonical(&self.community);

        Ok(ScenarioResult {
            community: self.community.clone(),
            fractions: self.fractions.clone(),
            base: self.base.clone(),
            history,
            ledger,
            fixed_points,
            interim,
            metrics,
            integrity,
            failure,
            mode: self.config.mode,
        })
    }
}

fn record_stationary_transfers(
    round: usize,
    plan: &AllocationPlan,
    fractions: &[f64],
    totals: &[f64],
    ledger: &mut DonationLedger,
) {
    for (donor, row) in plan.rows().iter().enumerate() {
        let pool = fractions[donor] * totals[donor];
        if pool <= 0.0 {
            continue;
        }
        for &(recipient, w) in row {
            ledger.push(Transfer {
                round,
                donor,
                recipient,
                amount: w * pool,
            });
        }
    }
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioResult> {
    if config.policy.domain_budgets.is_some() {
        return Err(Error::config(
            "/policy/domain_budgets",
            "partitioned scenarios run through run_partitioned",
        ));
    }
    Scenario::prepare(config)?.run()
}

#[derive(Debug, Clone)]
pub struct PartitionResult {
    pub domain: String,
    /// Positions in the full community.
    pub positions: Vec<usize>,
    pub result: ScenarioResult,
}

/// One independent scenario per budgeted domain; donations never cross
/// domains. Output order is by domain name.
pub fn run_partitioned(config: &ScenarioConfig) -> Result<Vec<PartitionResult>> {
    config.check()?;
    let Some(budgets) = &config.policy.domain_budgets else {
        return Err(Error::config("/policy/domain_budgets", "no domain budgets configured"));
    };
    let community = config.build_community()?;
    let partitions = partition_budgets(&community, budgets, &config.policy.excluded_domains, &config.policy)?;
    partitions
        .into_par_iter()
        .map(|part| {
            let sub_config = ScenarioConfig {
                policy: part.policy.clone(),
                ..config.clone()
            };
            let result = Scenario::with_community(&sub_config, part.community)?.run()?;
            Ok(PartitionResult {
                domain: part.domain,
                positions: part.positions,
                result,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub gini: Option<f64>,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

/// Runs the scenario once per default donation fraction. The community and
/// every random draw are shared across points; failures are collected per
/// point rather than aborting the sweep.
pub fn sweep(base_config: &ScenarioConfig, f_values: &[f64]) -> Result<SweepResult> {
    if f_values.is_empty() {
        return Err(Error::config("/fractions", "at least one fraction is required"));
    }
    let bad: Vec<ConfigIssue> = f_values
        .iter()
        .enumerate()
        .filter(|(_, f)| !(f.is_finite() && (0.0..1.0).contains(*f)))
        .map(|(k, f)| ConfigIssue::new(format!("/fractions/{k}"), format!("{f} is outside [0, 1)")))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    base_config.check()?;
    let community = base_config.build_community()?;
    let points = f_values
        .par_iter()
        .map(|&f| {
            let mut config = base_config.clone();
            config.policy.default_fraction = f;
            let outcome = Scenario::with_community(&config, community.clone()).and_then(|s| s.run());
            match outcome {
                Ok(result) => match (&result.failure, result.metrics) {
                    (None, Some(m)) => SweepPoint {
                        fraction: f,
                        gini: Some(m.gini),
                        metrics: Some(m),
                        error: None,
                    },
                    (failure, _) => SweepPoint {
                        fraction: f,
                        gini: None,
                        metrics: None,
                        error: Some(format!("did not converge: {failure:?}")),
                    },
                },
                Err(e) => SweepPoint {
                    fraction: f,
                    gini: None,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SweepResult {
        seed: base_config.seed,
        points,
    })
}
