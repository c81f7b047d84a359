//! Policy levers on top of the base mechanism.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::integrity::{CartelThresholds, CoiRules, ConflictSet, PenaltyPolicy};
use crate::mechanism::{normalize_row, AllocationPlan, PlanRow};
use crate::population::{Agent, AgentId, Community};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublicPreset {
    Uniform,
}

/// How the public share of the budget is spread over scientists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PublicPreference {
    Preset(PublicPreset),
    /// Scientist id → weight. Must sum to one; absent scientists get zero.
    Weights(BTreeMap<AgentId, f64>),
}

impl Default for PublicPreference {
    fn default() -> Self {
        PublicPreference::Preset(PublicPreset::Uniform)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub total_budget: f64,
    pub default_fraction: f64,
    /// Tag → fraction. The first tag (in declared order) an agent carries wins.
    pub fraction_overrides: IndexMap<String, f64>,
    /// Tag → donor-side weight multiplier.
    pub group_multipliers: BTreeMap<String, f64>,
    pub public_fraction: f64,
    pub public_pref: PublicPreference,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Reference year for age predicates and coauthorship windows.
    pub evaluation_year: i32,
    pub coi_rules: CoiRules,
    pub cartel_thresholds: CartelThresholds,
    pub penalty_policy: Option<PenaltyPolicy>,
    /// Per-domain budgets; when present the scenario runs one independent
    /// partition per domain.
    pub domain_budgets: Option<BTreeMap<String, f64>>,
    pub excluded_domains: BTreeSet<String>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            total_budget: 1_000_000.0,
            default_fraction: 0.5,
            fraction_overrides: IndexMap::new(),
            group_multipliers: BTreeMap::new(),
            public_fraction: 0.0,
            public_pref: PublicPreference::default(),
            tolerance: 1e-12,
            max_iter: 10_000,
            evaluation_year: 2024,
            coi_rules: CoiRules::default(),
            cartel_thresholds: CartelThresholds::default(),
            penalty_policy: None,
            domain_budgets: None,
            excluded_domains: BTreeSet::new(),
        }
    }
}

impl PolicyConfig {
    pub fn issues(&self, base: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let at = |field: &str| format!("{base}/{field}");
        let fraction_ok = |f: f64| f.is_finite() && (0.0..1.0).contains(&f);
        if !(self.total_budget.is_finite() && self.total_budget > 0.0) {
            out.push(ConfigIssue::new(at("total_budget"), "must be > 0"));
        }
        if !fraction_ok(self.default_fraction) {
            out.push(ConfigIssue::new(at("default_fraction"), "must be in [0, 1)"));
        }
        for (tag, &f) in &self.fraction_overrides {
            if !fraction_ok(f) {
                out.push(ConfigIssue::new(
                    format!("{base}/fraction_overrides/{tag}"),
                    "must be in [0, 1)",
                ));
            }
        }
        for (tag, &m) in &self.group_multipliers {
            if !(m.is_finite() && m > 0.0) {
                out.push(ConfigIssue::new(format!("{base}/group_multipliers/{tag}"), "must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.public_fraction) {
            out.push(ConfigIssue::new(at("public_fraction"), "must be in [0, 1]"));
        }
        if let PublicPreference::Weights(w) = &self.public_pref {
            if w.values().any(|&x| !(x.is_finite() && x >= 0.0)) {
                out.push(ConfigIssue::new(at("public_pref"), "weights must be >= 0"));
            }
            let sum: f64 = w.values().sum();
            if (sum - 1.0).abs() > 1e-9 {
                out.push(ConfigIssue::new(at("public_pref"), format!("weights sum to {sum}, expected 1")));
            }
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            out.push(ConfigIssue::new(at("tolerance"), "must be > 0"));
        }
        if self.max_iter == 0 {
            out.push(ConfigIssue::new(at("max_iter"), "must be >= 1"));
        }
        if let Err(Error::Config(mut issues)) = self.cartel_thresholds.check() {
            for issue in &mut issues {
                issue.pointer = issue.pointer.replacen("/policy", base, 1);
            }
            out.extend(issues);
        }
        if let Some(budgets) = &self.domain_budgets {
            for (domain, &b) in budgets {
                if !(b.is_finite() && b > 0.0) {
                    out.push(ConfigIssue::new(format!("{base}/domain_budgets/{domain}"), "must be > 0"));
                }
            }
        }
        out
    }

    /// Override and multiplier tags no agent carries.
    pub fn unknown_tags(&self, community: &Community) -> Vec<String> {
        let present: BTreeSet<&str> = community
            .agents()
            .iter()
            .flat_map(|a| a.group_tags.iter().map(String::as_str))
            .collect();
        self.fraction_overrides
            .keys()
            .chain(self.group_multipliers.keys())
            .filter(|t| !present.contains(t.as_str()))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Per-agent public weights `q`, zero on super-nodes.
pub fn public_weights(community: &Community, pref: &PublicPreference) -> Result<Vec<f64>> {
    let scientists = community.scientist_count();
    if scientists == 0 {
        return Err(Error::EmptyPopulation("community has no scientists".into()));
    }
    match pref {
        PublicPreference::Preset(PublicPreset::Uniform) => Ok(community
            .agents()
            .iter()
            .map(|a| if a.is_scientist() { 1.0 / scientists as f64 } else { 0.0 })
            .collect()),
        PublicPreference::Weights(weights) => {
            let mut q = vec![0.0; community.len()];
            let mut bad = Vec::new();
            for (id, &w) in weights {
                match community.position(id) {
                    Some(i) if community.agent(i).is_scientist() => q[i] = w,
                    _ => bad.push(id.to_string()),
                }
            }
            if !bad.is_empty() {
                return Err(Error::validation("public preference names a non-scientist", bad));
            }
            Ok(q)
        }
    }
}

/// `β_i = (1 − p)·B/N_s + p·B·q_i` for scientists, zero for super-nodes.
pub fn base_vector(budget: f64, community: &Community, public_fraction: f64, public_pref: &[f64]) -> Result<Vec<f64>> {
    if !(budget.is_finite() && budget > 0.0) {
        return Err(Error::config("/policy/total_budget", "must be > 0"));
    }
    if !(0.0..=1.0).contains(&public_fraction) {
        return Err(Error::config("/policy/public_fraction", "must be in [0, 1]"));
    }
    if public_pref.len() != community.len() {
        return Err(Error::Dimension(format!(
            "public preference has length {}, expected {}",
            public_pref.len(),
            community.len()
        )));
    }
    let scientists = community.scientist_count();
    if scientists == 0 {
        return Err(Error::EmptyPopulation("community has no scientists".into()));
    }
    let misplaced: Vec<String> = community
        .agents()
        .iter()
        .zip(public_pref)
        .filter(|(a, &q)| q < 0.0 || (a.is_super_node() && q != 0.0))
        .map(|(a, _)| a.id.to_string())
        .collect();
    if !misplaced.is_empty() {
        return Err(Error::validation(
            "public preference must be >= 0 and zero on super-nodes",
            misplaced,
        ));
    }
    let mass: f64 = public_pref.iter().sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::validation(
            format!("public preference sums to {mass}, expected 1"),
            vec![],
        ));
    }
    let equal = (1.0 - public_fraction) * budget / scientists as f64;
    Ok(community
        .agents()
        .iter()
        .zip(public_pref)
        .map(|(a, &q)| {
            if a.is_scientist() {
                equal + public_fraction * budget * q
            } else {
                0.0
            }
        })
        .collect())
}

/// Donation fraction of every agent. Precedence: super-node (always 0),
/// the agent's own override, the first matching tag override, the default.
pub fn resolve_fractions(community: &Community, policy: &PolicyConfig) -> Result<Vec<f64>> {
    let fractions: Vec<f64> = community
        .agents()
        .iter()
        .map(|a| fraction_for(a, policy))
        .collect();
    let bad: Vec<String> = community
        .agents()
        .iter()
        .zip(&fractions)
        .filter(|(_, f)| !(f.is_finite() && (0.0..1.0).contains(*f)))
        .map(|(a, _)| a.id.to_string())
        .collect();
    if bad.is_empty() {
        Ok(fractions)
    } else {
        Err(Error::validation("donation fraction outside [0, 1)", bad))
    }
}

fn fraction_for(agent: &Agent, policy: &PolicyConfig) -> f64 {
    if agent.is_super_node() {
        return 0.0;
    }
    if let Some(f) = agent.fraction_override {
        return f;
    }
    policy
        .fraction_overrides
        .iter()
        .find(|(tag, _)| agent.group_tags.contains(*tag))
        .map(|(_, &f)| f)
        .unwrap_or(policy.default_fraction)
}

/// Product of the multipliers of every tag the agent carries.
pub fn multiplier_for(agent: &Agent, multipliers: &BTreeMap<String, f64>) -> f64 {
    agent
        .group_tags
        .iter()
        .filter_map(|t| multipliers.get(t))
        .product()
}

/// `w'_ij = w_ij·m(j) / Σ_k w_ik·m(k)`.
pub fn apply_group_multiplier(
    plan: &AllocationPlan,
    community: &Community,
    multipliers: &BTreeMap<String, f64>,
) -> Result<AllocationPlan> {
    if let Some((tag, _)) = multipliers.iter().find(|(_, &m)| !(m.is_finite() && m > 0.0)) {
        return Err(Error::config(format!("/policy/group_multipliers/{tag}"), "must be > 0"));
    }
    if multipliers.is_empty() {
        return Ok(plan.clone());
    }
    let factor: Vec<f64> = community
        .agents()
        .iter()
        .map(|a| multiplier_for(a, multipliers))
        .collect();
    let rows = plan
        .rows()
        .iter()
        .map(|row| normalize_row(row.iter().map(|&(j, w)| (j, w * factor[j])).collect()))
        .collect();
    AllocationPlan::new(rows)
}

/// Recipient filters offered as ready-made donation options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    Tag { value: String },
    YoungerThan { limit: i32 },
    Domain { value: String },
}

impl Predicate {
    pub fn matches(&self, agent: &Agent, evaluation_year: i32) -> bool {
        match self {
            Predicate::Tag { value } => agent.group_tags.contains(value),
            Predicate::YoungerThan { limit } => {
                agent.is_scientist() && evaluation_year - agent.birth_year < *limit
            }
            Predicate::Domain { value } => &agent.domain_id == value,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Tag { value } => write!(f, "tag={value}"),
            Predicate::YoungerThan { limit } => write!(f, "age<{limit}"),
            Predicate::Domain { value } => write!(f, "domain={value}"),
        }
    }
}

/// Even split over every non-conflicted agent the predicate selects.
pub fn predicate_plan(
    donor: usize,
    predicate: &Predicate,
    community: &Community,
    conflicts: &ConflictSet,
    evaluation_year: i32,
) -> Result<PlanRow> {
    let eligible: Vec<usize> = community
        .agents()
        .iter()
        .enumerate()
        .filter(|&(j, a)| j != donor && !conflicts.contains(donor, j) && predicate.matches(a, evaluation_year))
        .map(|(j, _)| j)
        .collect();
    if eligible.is_empty() {
        return Err(Error::EmptyTarget {
            predicate: predicate.to_string(),
            donor: community.id(donor).to_string(),
        });
    }
    let w = 1.0 / eligible.len() as f64;
    Ok(eligible.into_iter().map(|j| (j, w)).collect())
}

/// Adds a project or infrastructure that can receive donations.
pub fn attach_super_node(community: &Community, name: &str, domain_id: &str) -> Result<Community> {
    community.with_agent(Agent::super_node(name, domain_id))
}

/// One domain's independent scenario.
#[derive(Debug, Clone)]
pub struct Partition {
    pub domain: String,
    /// Positions of the partition's agents in the parent community.
    pub positions: Vec<usize>,
    pub community: Community,
    pub policy: PolicyConfig,
}

/// Splits the community by domain, one budget each. Every populated domain
/// must be budgeted or excluded, and every budgeted domain populated.
pub fn partition_budgets(
    community: &Community,
    domain_budgets: &BTreeMap<String, f64>,
    excluded: &BTreeSet<String>,
    policy: &PolicyConfig,
) -> Result<Vec<Partition>> {
    let mut issues = Vec::new();
    let populated = community.domains();
    for (domain, &budget) in domain_budgets {
        if !populated.contains(domain.as_str()) {
            issues.push(ConfigIssue::new(
                format!("/policy/domain_budgets/{domain}"),
                "budgeted domain has no agents",
            ));
        }
        if !(budget.is_finite() && budget > 0.0) {
            issues.push(ConfigIssue::new(format!("/policy/domain_budgets/{domain}"), "must be > 0"));
        }
    }
    for domain in &populated {
        if !domain_budgets.contains_key(*domain) && !excluded.contains(*domain) {
            issues.push(ConfigIssue::new(
                "/policy/domain_budgets",
                format!("populated domain {domain} has no budget"),
            ));
        }
    }
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }

    let mut out = Vec::with_capacity(domain_budgets.len());
    for (domain, &budget) in domain_budgets {
        let positions = community.domain_members(domain);
        let sub = community.subset(&positions);
        if sub.scientist_count() == 0 {
            return Err(Error::config(
                format!("/policy/domain_budgets/{domain}"),
                "budgeted domain has no scientists",
            ));
        }
        let public_pref = match &policy.public_pref {
            PublicPreference::Weights(w) => {
                let kept: BTreeMap<AgentId, f64> = w
                    .iter()
                    .filter(|(id, _)| sub.position(id).is_some())
                    .map(|(id, &x)| (id.clone(), x))
                    .collect();
                let mass: f64 = kept.values().sum();
                if mass <= 0.0 {
                    return Err(Error::config(
                        "/policy/public_pref",
                        format!("no public preference mass inside domain {domain}"),
                    ));
                }
                PublicPreference::Weights(kept.into_iter().map(|(id, x)| (id, x / mass)).collect())
            }
            preset => preset.clone(),
        };
        out.push(Partition {
            domain: domain.clone(),
            positions,
            community: sub,
            policy: PolicyConfig {
                total_budget: budget,
                public_pref,
                domain_budgets: None,
                excluded_domains: BTreeSet::new(),
                ..policy.clone()
            },
        });
    }
    Ok(out)
}
