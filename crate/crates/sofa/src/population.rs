//! Scientific communities: agents, coauthorship, affiliations and domains.
//!
//! A [`Community`] is immutable once built. Agents are addressed internally by
//! their position in [`Community::agents`]; every vector handed to the
//! mechanism uses the same order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::rng;

pub const COMMUNITY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        AgentId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Scientist,
    /// A fundable project or infrastructure. Receives donations, holds no
    /// base share and never donates.
    SuperNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    pub kind: AgentKind,
    #[serde(default)]
    pub group_tags: BTreeSet<String>,
    pub birth_year: i32,
    pub domain_id: String,
    #[serde(default)]
    pub affiliation_ids: BTreeSet<String>,
    #[serde(default)]
    pub merit: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction_override: Option<f64>,
}

impl Agent {
    pub fn scientist(id: impl Into<String>, domain_id: impl Into<String>) -> Self {
        Agent {
            id: AgentId::new(id),
            kind: AgentKind::Scientist,
            group_tags: BTreeSet::new(),
            birth_year: 1980,
            domain_id: domain_id.into(),
            affiliation_ids: BTreeSet::new(),
            merit: 1.0,
            fraction_override: None,
        }
    }

    pub fn super_node(id: impl Into<String>, domain_id: impl Into<String>) -> Self {
        Agent {
            id: AgentId::new(id),
            kind: AgentKind::SuperNode,
            group_tags: BTreeSet::new(),
            birth_year: 0,
            domain_id: domain_id.into(),
            affiliation_ids: BTreeSet::new(),
            merit: 0.0,
            fraction_override: None,
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.group_tags.insert(tag.into());
        self
    }

    pub fn with_affiliation(mut self, aff: impl Into<String>) -> Self {
        self.affiliation_ids.insert(aff.into());
        self
    }

    pub fn with_birth_year(mut self, year: i32) -> Self {
        self.birth_year = year;
        self
    }

    pub fn with_merit(mut self, merit: f64) -> Self {
        self.merit = merit;
        self
    }

    pub fn with_fraction_override(mut self, f: f64) -> Self {
        self.fraction_override = Some(f);
        self
    }

    pub fn is_scientist(&self) -> bool {
        self.kind == AgentKind::Scientist
    }

    pub fn is_super_node(&self) -> bool {
        self.kind == AgentKind::SuperNode
    }
}

/// Undirected coauthorship edge between two agent positions, `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CoauthorEdge {
    pub a: usize,
    pub b: usize,
    pub last_year: i32,
}

#[derive(Debug, Clone)]
pub struct Community {
    agents: Vec<Agent>,
    coauthor_edges: Vec<CoauthorEdge>,
    index: HashMap<AgentId, usize>,
}

impl PartialEq for Community {
    fn eq(&self, other: &Self) -> bool {
        self.agents == other.agents && self.coauthor_edges == other.coauthor_edges
    }
}

impl Community {
    /// Builds a validated community. Edges are given by agent id; repeated
    /// pairs collapse to the most recent year.
    pub fn new(agents: Vec<Agent>, edges: Vec<(AgentId, AgentId, i32)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(agents.len());
        let mut duplicates = BTreeSet::new();
        for (pos, agent) in agents.iter().enumerate() {
            if index.insert(agent.id.clone(), pos).is_some() {
                duplicates.insert(agent.id.to_string());
            }
        }
        if !duplicates.is_empty() {
            return Err(Error::validation(
                "duplicate agent id",
                duplicates.into_iter().collect(),
            ));
        }

        let bad_values: Vec<String> = agents
            .iter()
            .filter(|a| {
                !(a.merit.is_finite() && a.merit >= 0.0)
                    || a.fraction_override
                        .is_some_and(|f| !(f.is_finite() && (0.0..1.0).contains(&f)))
            })
            .map(|a| a.id.to_string())
            .collect();
        if !bad_values.is_empty() {
            return Err(Error::validation(
                "merit must be >= 0 and fraction_override in [0, 1)",
                bad_values,
            ));
        }
        let blank_domain: Vec<String> = agents
            .iter()
            .filter(|a| a.domain_id.is_empty())
            .map(|a| a.id.to_string())
            .collect();
        if !blank_domain.is_empty() {
            return Err(Error::validation("agent has no domain", blank_domain));
        }

        let mut dangling = BTreeSet::new();
        let mut self_loops = BTreeSet::new();
        let mut merged: BTreeMap<(usize, usize), i32> = BTreeMap::new();
        for (x, y, year) in edges {
            let (Some(&i), Some(&j)) = (index.get(&x), index.get(&y)) else {
                if !index.contains_key(&x) {
                    dangling.insert(x.to_string());
                }
                if !index.contains_key(&y) {
                    dangling.insert(y.to_string());
                }
                continue;
            };
            if i == j {
                self_loops.insert(x.to_string());
                continue;
            }
            let key = (i.min(j), i.max(j));
            let slot = merged.entry(key).or_insert(year);
            *slot = (*slot).max(year);
        }
        if !dangling.is_empty() {
            return Err(Error::validation(
                "coauthor edge references unknown agent",
                dangling.into_iter().collect(),
            ));
        }
        if !self_loops.is_empty() {
            return Err(Error::validation(
                "coauthor self-edge",
                self_loops.into_iter().collect(),
            ));
        }

        let coauthor_edges = merged
            .into_iter()
            .map(|((a, b), last_year)| CoauthorEdge { a, b, last_year })
            .collect();
        Ok(Community {
            agents,
            coauthor_edges,
            index,
        })
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn agent(&self, pos: usize) -> &Agent {
        &self.agents[pos]
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn coauthor_edges(&self) -> &[CoauthorEdge] {
        &self.coauthor_edges
    }

    pub fn position(&self, id: &AgentId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.index.get(&AgentId::new(id)).copied()
    }

    pub fn id(&self, pos: usize) -> &AgentId {
        &self.agents[pos].id
    }

    pub fn scientist_count(&self) -> usize {
        self.agents.iter().filter(|a| a.is_scientist()).count()
    }

    /// Domain labels in sorted order.
    pub fn domains(&self) -> BTreeSet<&str> {
        self.agents.iter().map(|a| a.domain_id.as_str()).collect()
    }

    pub fn affiliations(&self) -> BTreeSet<&str> {
        self.agents
            .iter()
            .flat_map(|a| a.affiliation_ids.iter().map(String::as_str))
            .collect()
    }

    pub fn domain_members(&self, domain: &str) -> Vec<usize> {
        (0..self.agents.len())
            .filter(|&i| self.agents[i].domain_id == domain)
            .collect()
    }

    /// Positions ordered by agent id; the canonical row order for output.
    pub fn order_by_id(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.agents.len()).collect();
        order.sort_by(|&x, &y| self.agents[x].id.cmp(&self.agents[y].id));
        order
    }

    /// Restriction to a subset of positions. Edges with an endpoint outside
    /// the subset are dropped.
    pub fn subset(&self, positions: &[usize]) -> Community {
        let agents: Vec<Agent> = positions.iter().map(|&p| self.agents[p].clone()).collect();
        let keep: HashMap<usize, usize> = positions
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        let mut coauthor_edges: Vec<CoauthorEdge> = self
            .coauthor_edges
            .iter()
            .filter_map(|e| {
                let (a, b) = (*keep.get(&e.a)?, *keep.get(&e.b)?);
                Some(CoauthorEdge {
                    a: a.min(b),
                    b: a.max(b),
                    last_year: e.last_year,
                })
            })
            .collect();
        coauthor_edges.sort();
        let index = agents
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), i))
            .collect();
        Community {
            agents,
            coauthor_edges,
            index,
        }
    }

    pub(crate) fn with_agent(&self, agent: Agent) -> Result<Community> {
        if self.index.contains_key(&agent.id) {
            return Err(Error::validation(
                "duplicate agent id",
                vec![agent.id.to_string()],
            ));
        }
        let mut next = self.clone();
        next.index.insert(agent.id.clone(), next.agents.len());
        next.agents.push(agent);
        Ok(next)
    }

    pub fn to_file(&self) -> CommunityFile {
        CommunityFile {
            schema_version: COMMUNITY_SCHEMA_VERSION,
            agents: self.agents.clone(),
            coauthor_edges: self
                .coauthor_edges
                .iter()
                .map(|e| (self.id(e.a).clone(), self.id(e.b).clone(), e.last_year))
                .collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("community serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Community> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: CommunityFile = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Format(format!("community file at {}: {}", e.path(), e.inner())))?;
        if file.schema_version != COMMUNITY_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported community schema_version {} (expected {COMMUNITY_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Community::new(file.agents, file.coauthor_edges)
    }
}

/// On-disk community schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunityFile {
    pub schema_version: u32,
    pub agents: Vec<Agent>,
    #[serde(default)]
    pub coauthor_edges: Vec<(AgentId, AgentId, i32)>,
}

pub fn load_community(path: impl AsRef<Path>) -> Result<Community> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Community::from_json_str(&text)
}

pub fn save_community(community: &Community, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, community.to_json_string()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeritParams {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for MeritParams {
    fn default() -> Self {
        MeritParams { mu: 0.0, sigma: 1.0 }
    }
}

/// Parameters of a synthetic community.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunitySpec {
    pub n_agents: usize,
    #[serde(default = "default_one")]
    pub n_affiliations: usize,
    #[serde(default = "default_one")]
    pub n_domains: usize,
    /// Tag family → label → proportion. Each agent carries at most one label
    /// per family.
    #[serde(default)]
    pub group_tag_proportions: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub coauthor_mean_degree: f64,
    #[serde(default)]
    pub merit: MeritParams,
    /// Probability that a coauthor edge stays inside the domain.
    #[serde(default = "default_intra_domain")]
    pub intra_domain_bias: f64,
    #[serde(default = "default_coauthor_years")]
    pub coauthor_years: (i32, i32),
    #[serde(default = "default_birth_years")]
    pub birth_years: (i32, i32),
}

fn default_one() -> usize {
    1
}

fn default_intra_domain() -> f64 {
    0.8
}

fn default_coauthor_years() -> (i32, i32) {
    (2000, 2024)
}

fn default_birth_years() -> (i32, i32) {
    (1950, 1998)
}

impl CommunitySpec {
    pub fn new(n_agents: usize) -> Self {
        CommunitySpec {
            n_agents,
            n_affiliations: 1,
            n_domains: 1,
            group_tag_proportions: BTreeMap::new(),
            coauthor_mean_degree: 0.0,
            merit: MeritParams::default(),
            intra_domain_bias: default_intra_domain(),
            coauthor_years: default_coauthor_years(),
            birth_years: default_birth_years(),
        }
    }

    /// All problems with the spec, with pointers relative to `base`.
    pub fn issues(&self, base: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let at = |field: &str| format!("{base}/{field}");
        if self.n_agents < 2 {
            out.push(ConfigIssue::new(at("n_agents"), "must be >= 2"));
        }
        if self.n_affiliations == 0 || self.n_affiliations > self.n_agents.max(1) {
            out.push(ConfigIssue::new(
                at("n_affiliations"),
                "must be between 1 and n_agents",
            ));
        }
        if self.n_domains == 0 || self.n_domains > self.n_agents.max(1) {
            out.push(ConfigIssue::new(at("n_domains"), "must be between 1 and n_agents"));
        }
        for (family, labels) in &self.group_tag_proportions {
            let mut sum = 0.0;
            for (label, &p) in labels {
                if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                    out.push(ConfigIssue::new(
                        format!("{base}/group_tag_proportions/{family}/{label}"),
                        "must be in [0, 1]",
                    ));
                }
                sum += p;
            }
            if sum > 1.0 + 1e-12 {
                out.push(ConfigIssue::new(
                    format!("{base}/group_tag_proportions/{family}"),
                    format!("proportions sum to {sum}, must be <= 1"),
                ));
            }
        }
        let max_degree = self.n_agents.saturating_sub(1) as f64;
        if !(self.coauthor_mean_degree.is_finite()
            && self.coauthor_mean_degree >= 0.0
            && self.coauthor_mean_degree <= max_degree.max(0.0))
        {
            out.push(ConfigIssue::new(
                at("coauthor_mean_degree"),
                "must be in [0, n_agents - 1]",
            ));
        }
        if !(self.merit.mu.is_finite() && self.merit.sigma.is_finite() && self.merit.sigma >= 0.0) {
            out.push(ConfigIssue::new(at("merit"), "mu must be finite and sigma >= 0"));
        }
        if !(0.0..=1.0).contains(&self.intra_domain_bias) {
            out.push(ConfigIssue::new(at("intra_domain_bias"), "must be in [0, 1]"));
        }
        if self.coauthor_years.0 > self.coauthor_years.1 {
            out.push(ConfigIssue::new(at("coauthor_years"), "range is reversed"));
        }
        if self.birth_years.0 > self.birth_years.1 {
            out.push(ConfigIssue::new(at("birth_years"), "range is reversed"));
        }
        out
    }
}

fn padded_labels(prefix: &str, n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (1..=n).map(|i| format!("{prefix}-{i:0width$}")).collect()
}

/// Synthesizes a community. A pure function of `(spec, seed)`.
pub fn generate_community(spec: &CommunitySpec, seed: u64) -> Result<Community> {
    let issues = spec.issues("");
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    let n = spec.n_agents;
    let ids = padded_labels("agent", n);
    let domain_labels = padded_labels("domain", spec.n_domains);
    let aff_labels = padded_labels("aff", spec.n_affiliations);

    // Round-robin then shuffle, so every domain and affiliation is populated.
    let mut domain_of: Vec<usize> = (0..n).map(|i| i % spec.n_domains).collect();
    domain_of.shuffle(&mut rng::stream(seed, "population/domains", "", 0));
    let mut aff_of: Vec<usize> = (0..n).map(|i| i % spec.n_affiliations).collect();
    aff_of.shuffle(&mut rng::stream(seed, "population/affiliations", "", 0));

    let merit_dist = LogNormal::new(spec.merit.mu, spec.merit.sigma)
        .map_err(|e| Error::config("/merit", e.to_string()))?;
    let mut attr_rng = rng::stream(seed, "population/attributes", "", 0);
    let mut agents = Vec::with_capacity(n);
    for (i, id) in ids.iter().enumerate() {
        let mut group_tags = BTreeSet::new();
        for labels in spec.group_tag_proportions.values() {
            let u: f64 = attr_rng.random();
            let mut acc = 0.0;
            for (label, &p) in labels {
                acc += p;
                if u < acc {
                    group_tags.insert(label.clone());
                    break;
                }
            }
        }
        let birth_year = attr_rng.random_range(spec.birth_years.0..=spec.birth_years.1);
        let merit = merit_dist.sample(&mut attr_rng);
        agents.push(Agent {
            id: AgentId::new(id.clone()),
            kind: AgentKind::Scientist,
            group_tags,
            birth_year,
            domain_id: domain_labels[domain_of[i]].clone(),
            affiliation_ids: BTreeSet::from([aff_labels[aff_of[i]].clone()]),
            merit,
            fraction_override: None,
        });
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.n_domains];
    for (i, &d) in domain_of.iter().enumerate() {
        members[d].push(i);
    }
    let max_edges = n * (n - 1) / 2;
    let target = ((n as f64 * spec.coauthor_mean_degree / 2.0).round() as usize).min(max_edges);
    let mut edge_rng = rng::stream(seed, "population/coauthors", "", 0);
    let mut pairs: BTreeMap<(usize, usize), i32> = BTreeMap::new();
    let mut attempts = 0usize;
    let budget = 50 * target + 100;
    while pairs.len() < target && attempts < budget {
        attempts += 1;
        let a = edge_rng.random_range(0..n);
        let pool = &members[domain_of[a]];
        let b = if edge_rng.random::<f64>() < spec.intra_domain_bias && pool.len() > 1 {
            pool[edge_rng.random_range(0..pool.len())]
        } else {
            edge_rng.random_range(0..n)
        };
        let year = edge_rng.random_range(spec.coauthor_years.0..=spec.coauthor_years.1);
        if a == b {
            continue;
        }
        pairs.entry((a.min(b), a.max(b))).or_insert(year);
    }

    let edges = pairs
        .into_iter()
        .map(|((a, b), y)| (agents[a].id.clone(), agents[b].id.clone(), y))
        .collect();
    Community::new(agents, edges)
}
