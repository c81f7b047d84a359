//! Conflict-of-interest masking, the donation ledger, cartel detection and
//! penalties.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::{normalize_row, AllocationPlan, PlanRow};
use crate::population::Community;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConflictReasons {
    pub coauthor: bool,
    pub shared_affiliation: bool,
}

impl ConflictReasons {
    pub fn labels(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.coauthor {
            out.push("coauthor");
        }
        if self.shared_affiliation {
            out.push("shared_affiliation");
        }
        out
    }
}

/// Symmetric set of forbidden donor/recipient pairs.
///
/// Shared-affiliation conflicts are kept as member groups rather than
/// expanded into pairs, so a large affiliation costs memory linear in its
/// size.
#[derive(Debug, Clone, Default)]
pub struct ConflictSet {
    explicit: Vec<BTreeMap<usize, ConflictReasons>>,
    groups_of: Vec<Vec<usize>>,
    groups: Vec<Vec<usize>>,
}

impl ConflictSet {
    pub fn new(n: usize) -> Self {
        ConflictSet {
            explicit: vec![BTreeMap::new(); n],
            groups_of: vec![Vec::new(); n],
            groups: Vec::new(),
        }
    }

    fn grow(&mut self, needed: usize) {
        if self.explicit.len() < needed {
            self.explicit.resize(needed, BTreeMap::new());
            self.groups_of.resize(needed, Vec::new());
        }
    }

    pub fn insert_coauthor(&mut self, i: usize, j: usize) {
        self.insert_with(i, j, |r| r.coauthor = true);
    }

    pub fn insert_shared_affiliation(&mut self, i: usize, j: usize) {
        self.insert_with(i, j, |r| r.shared_affiliation = true);
    }

    /// Marks every pair within `members` as sharing an affiliation.
    pub fn insert_affiliation_group(&mut self, members: &[usize]) {
        let mut members = members.to_vec();
        members.sort_unstable();
        members.dedup();
        if members.len() < 2 {
            return;
        }
        self.grow(members[members.len() - 1] + 1);
        let g = self.groups.len();
        for &i in &members {
            self.groups_of[i].push(g);
        }
        self.groups.push(members);
    }

    fn insert_with(&mut self, i: usize, j: usize, mark: impl Fn(&mut ConflictReasons)) {
        if i == j {
            return;
        }
        self.grow(i.max(j) + 1);
        mark(self.explicit[i].entry(j).or_default());
        mark(self.explicit[j].entry(i).or_default());
    }

    fn share_group(&self, i: usize, j: usize) -> bool {
        let (Some(a), Some(b)) = (self.groups_of.get(i), self.groups_of.get(j)) else {
            return false;
        };
        a.iter().any(|g| b.contains(g))
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i != j && (self.explicit.get(i).is_some_and(|m| m.contains_key(&j)) || self.share_group(i, j))
    }

    pub fn reasons(&self, i: usize, j: usize) -> Option<ConflictReasons> {
        if i == j {
            return None;
        }
        let mut r = self.explicit.get(i).and_then(|m| m.get(&j)).copied().unwrap_or_default();
        r.shared_affiliation |= self.share_group(i, j);
        (r.coauthor || r.shared_affiliation).then_some(r)
    }

    /// Everyone `i` may not donate to, sorted.
    pub fn conflicts_of(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.explicit.get(i).into_iter().flat_map(|m| m.keys().copied()).collect();
        for &g in self.groups_of.get(i).into_iter().flatten() {
            out.extend(self.groups[g].iter().copied().filter(|&j| j != i));
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Cheap upper bound on `conflicts_of(i).len()`.
    pub fn conflict_bound(&self, i: usize) -> usize {
        self.explicit.get(i).map_or(0, BTreeMap::len)
            + self
                .groups_of
                .get(i)
                .into_iter()
                .flatten()
                .map(|&g| self.groups[g].len() - 1)
                .sum::<usize>()
    }

    /// Number of conflicted pairs.
    pub fn len(&self) -> usize {
        (0..self.explicit.len()).map(|i| self.conflicts_of(i).len()).sum::<usize>() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty() && self.explicit.iter().all(BTreeMap::is_empty)
    }

    /// Every pair `(i, j)` with `i < j`, in order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), ConflictReasons)> + '_ {
        (0..self.explicit.len()).flat_map(move |i| {
            self.conflicts_of(i)
                .into_iter()
                .filter(move |&j| j > i)
                .map(move |j| ((i, j), self.reasons(i, j).expect("listed conflict")))
        })
    }
}

impl PartialEq for ConflictSet {
    fn eq(&self, other: &Self) -> bool {
        self.iter().eq(other.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoiRules {
    pub coauthor_window_years: u32,
    pub shared_affiliation: bool,
    /// When masking empties a row, spread it over the donor's domain.
    pub fallback_uniform_domain: bool,
}

impl Default for CoiRules {
    fn default() -> Self {
        CoiRules {
            coauthor_window_years: 5,
            shared_affiliation: true,
            fallback_uniform_domain: true,
        }
    }
}

/// Flags pairs that coauthored within the window or share an affiliation.
pub fn detect_conflicts(community: &Community, rules: &CoiRules, evaluation_year: i32) -> ConflictSet {
    let mut set = ConflictSet::new(community.len());
    for e in community.coauthor_edges() {
        if i64::from(evaluation_year) - i64::from(e.last_year) <= i64::from(rules.coauthor_window_years) {
            set.insert_coauthor(e.a, e.b);
        }
    }
    if rules.shared_affiliation {
        let mut by_affiliation: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, agent) in community.agents().iter().enumerate() {
            for aff in &agent.affiliation_ids {
                by_affiliation.entry(aff.as_str()).or_default().push(i);
            }
        }
        for members in by_affiliation.values() {
            set.insert_affiliation_group(members);
        }
    }
    set
}

/// Removes conflicted recipients and renormalizes. A donating row that loses
/// every recipient is an error.
pub fn mask_plan(plan: &AllocationPlan, conflicts: &ConflictSet) -> Result<AllocationPlan> {
    let rows = plan
        .rows()
        .iter()
        .enumerate()
        .map(|(donor, row)| {
            mask_row(donor, row, conflicts).ok_or_else(|| Error::EmptyRow {
                donor: format!("#{donor}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AllocationPlan::new(rows)
}

/// [`mask_plan`] with the domain fallback for rows that end up empty.
pub fn mask_plan_with_fallback(
    plan: &AllocationPlan,
    conflicts: &ConflictSet,
    community: &Community,
    fallback_uniform_domain: bool,
) -> Result<AllocationPlan> {
    let mut rows = Vec::with_capacity(plan.len());
    for (donor, row) in plan.rows().iter().enumerate() {
        let masked = match mask_row(donor, row, conflicts) {
            Some(r) => r,
            None if fallback_uniform_domain => {
                let domain = &community.agent(donor).domain_id;
                let eligible: Vec<(usize, f64)> = community
                    .agents()
                    .iter()
                    .enumerate()
                    .filter(|&(j, a)| j != donor && &a.domain_id == domain && !conflicts.contains(donor, j))
                    .map(|(j, _)| (j, 1.0))
                    .collect();
                if eligible.is_empty() {
                    return Err(Error::EmptyRow {
                        donor: community.id(donor).to_string(),
                    });
                }
                normalize_row(eligible)
            }
            None => {
                return Err(Error::EmptyRow {
                    donor: community.id(donor).to_string(),
                })
            }
        };
        rows.push(masked);
    }
    AllocationPlan::new(rows)
}

fn mask_row(donor: usize, row: &[(usize, f64)], conflicts: &ConflictSet) -> Option<PlanRow> {
    if row.iter().all(|&(j, _)| !conflicts.contains(donor, j)) {
        return Some(row.to_vec());
    }
    let kept: PlanRow = row
        .iter()
        .copied()
        .filter(|&(j, _)| !conflicts.contains(donor, j))
        .collect();
    if kept.is_empty() {
        None
    } else {
        Some(normalize_row(kept))
    }
}

/// One realized donation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transfer {
    pub round: usize,
    pub donor: usize,
    pub recipient: usize,
    pub amount: f64,
}

/// Ordered record of every donation made.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DonationLedger {
    records: Vec<Transfer>,
}

impl DonationLedger {
    pub fn new(records: Vec<Transfer>) -> Self {
        DonationLedger { records }
    }

    pub fn push(&mut self, t: Transfer) {
        self.records.push(t);
    }

    pub fn extend(&mut self, other: impl IntoIterator<Item = Transfer>) {
        self.records.extend(other);
    }

    pub fn records(&self) -> &[Transfer] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rounds(&self) -> BTreeSet<usize> {
        self.records.iter().map(|t| t.round).collect()
    }

    pub fn total(&self) -> f64 {
        self.records.iter().map(|t| t.amount).sum()
    }

    /// Sorted by round, donor, recipient; the serialized order.
    pub fn sort_canonical(&mut self, community: &Community) {
        self.records.sort_by(|x, y| {
            x.round
                .cmp(&y.round)
                .then_with(|| community.id(x.donor).cmp(community.id(y.donor)))
                .then_with(|| community.id(x.recipient).cmp(community.id(y.recipient)))
        });
    }
}

/// Donation pool `f_i·T_i` of every agent, per round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DonationPools {
    by_round: BTreeMap<usize, Vec<f64>>,
}

impl DonationPools {
    /// Pools as the sum of each donor's ledger entries in the round.
    pub fn from_ledger(ledger: &DonationLedger, n: usize) -> Self {
        let mut by_round: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for t in ledger.records() {
            by_round.entry(t.round).or_insert_with(|| vec![0.0; n])[t.donor] += t.amount;
        }
        DonationPools { by_round }
    }

    /// Pools from donation fractions and the totals each round donated from.
    pub fn from_totals<'a>(fractions: &[f64], history: impl IntoIterator<Item = (usize, &'a [f64])>) -> Self {
        let by_round = history
            .into_iter()
            .map(|(round, totals)| (round, totals.iter().zip(fractions).map(|(t, f)| t * f).collect()))
            .collect();
        DonationPools { by_round }
    }

    pub fn rounds(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_round.keys().copied()
    }

    pub fn pool(&self, round: usize, agent: usize) -> f64 {
        self.by_round
            .get(&round)
            .and_then(|v| v.get(agent))
            .copied()
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartelThresholds {
    /// Minimum share of each partner's pool sent to the other.
    pub pair_reciprocity: f64,
    /// Minimum share of a group's pooled donations that stays inside it.
    pub internal_share: f64,
    pub max_group_size: usize,
    /// Consecutive rounds the pattern has to persist.
    pub min_rounds: usize,
}

impl Default for CartelThresholds {
    fn default() -> Self {
        CartelThresholds {
            pair_reciprocity: 0.5,
            internal_share: 0.6,
            max_group_size: 5,
            min_rounds: 2,
        }
    }
}

impl CartelThresholds {
    pub fn check(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.pair_reciprocity) {
            return Err(Error::config("/policy/cartel_thresholds/pair_reciprocity", "must be in (0, 1]"));
        }
        if !unit(self.internal_share) {
            return Err(Error::config("/policy/cartel_thresholds/internal_share", "must be in (0, 1]"));
        }
        if self.max_group_size < 2 {
            return Err(Error::config("/policy/cartel_thresholds/max_group_size", "must be >= 2"));
        }
        if self.min_rounds == 0 {
            return Err(Error::config("/policy/cartel_thresholds/min_rounds", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartelKind {
    ReciprocalPair,
    Group,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartelFlag {
    pub kind: CartelKind,
    /// Sorted agent positions.
    pub members: Vec<usize>,
    /// Mean flagged share over the rounds the pattern held.
    pub score: f64,
    pub rounds_observed: usize,
    pub evidence: Vec<Transfer>,
}

/// Per-round aggregated flows `(donor, recipient) → amount`.
struct RoundFlows {
    rounds: Vec<usize>,
    flows: Vec<HashMap<(usize, usize), f64>>,
}

impl RoundFlows {
    fn new(ledger: &DonationLedger, pools: &DonationPools) -> Self {
        let rounds: Vec<usize> = pools
            .rounds()
            .chain(ledger.records().iter().map(|t| t.round))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let slot: HashMap<usize, usize> = rounds.iter().enumerate().map(|(k, &r)| (r, k)).collect();
        let mut flows = vec![HashMap::new(); rounds.len()];
        for t in ledger.records() {
            *flows[slot[&t.round]].entry((t.donor, t.recipient)).or_insert(0.0) += t.amount;
        }
        RoundFlows { rounds, flows }
    }

    fn amount(&self, k: usize, i: usize, j: usize) -> f64 {
        self.flows[k].get(&(i, j)).copied().unwrap_or(0.0)
    }
}

/// Share of the group's pooled donations sent to other members.
fn internal_share(flows: &RoundFlows, pools: &DonationPools, k: usize, members: &[usize]) -> f64 {
    let round = flows.rounds[k];
    let pooled: f64 = members.iter().map(|&i| pools.pool(round, i)).sum();
    if pooled <= 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for &i in members {
        for &j in members {
            if i != j {
                inside += flows.amount(k, i, j);
            }
        }
    }
    inside / pooled
}

/// Rounds belonging to runs of at least `min_rounds` consecutive round
/// numbers in which the condition held.
fn persistent_rounds(held: &[(usize, f64)], min_rounds: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut run: Vec<(usize, f64)> = Vec::new();
    for &(round, value) in held {
        if run.last().is_some_and(|&(prev, _)| prev + 1 != round) {
            if run.len() >= min_rounds {
                out.append(&mut run);
            }
            run.clear();
        }
        run.push((round, value));
    }
    if run.len() >= min_rounds {
        out.append(&mut run);
    }
    out
}

fn evidence(ledger: &DonationLedger, members: &[usize], rounds: &BTreeSet<usize>) -> Vec<Transfer> {
    ledger
        .records()
        .iter()
        .filter(|t| rounds.contains(&t.round) && members.contains(&t.donor) && members.contains(&t.recipient))
        .copied()
        .collect()
}

/// Finds reciprocal pairs and small closed donation groups that persist for
/// at least `min_rounds` consecutive rounds.
///
/// Group candidates are restricted to strongly connected sets of the graph
/// that keeps `i → j` when `i` sent at least `internal_share / max_group_size`
/// of its pooled donations (over all rounds) to `j`.
pub fn detect_cartels(
    ledger: &DonationLedger,
    pools: &DonationPools,
    thresholds: &CartelThresholds,
) -> Result<Vec<CartelFlag>> {
    thresholds.check()?;
    let mut rounds: BTreeSet<usize> = pools.rounds().collect();
    rounds.extend(ledger.rounds());
    if rounds.len() < thresholds.min_rounds {
        return Err(Error::InsufficientHistory {
            have: rounds.len(),
            need: thresholds.min_rounds,
        });
    }
    let flows = RoundFlows::new(ledger, pools);
    let mut flags = reciprocal_pairs(ledger, pools, &flows, thresholds);
    flags.extend(closed_groups(ledger, pools, &flows, thresholds));
    Ok(flags)
}

fn reciprocal_pairs(
    ledger: &DonationLedger,
    pools: &DonationPools,
    flows: &RoundFlows,
    th: &CartelThresholds,
) -> Vec<CartelFlag> {
    let mut held: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for (k, &round) in flows.rounds.iter().enumerate() {
        for (&(i, j), &a_ij) in &flows.flows[k] {
            if i >= j {
                continue;
            }
            let a_ji = flows.amount(k, j, i);
            let (p_i, p_j) = (pools.pool(round, i), pools.pool(round, j));
            if a_ji <= 0.0 || p_i <= 0.0 || p_j <= 0.0 {
                continue;
            }
            let share = (a_ij / p_i).min(a_ji / p_j);
            if share >= th.pair_reciprocity {
                held.entry((i, j)).or_default().push((round, share));
            }
        }
    }
    held.into_iter()
        .filter_map(|((i, j), mut rounds)| {
            rounds.sort_by_key(|&(r, _)| r);
            let kept = persistent_rounds(&rounds, th.min_rounds);
            if kept.is_empty() {
                return None;
            }
            let members = vec![i, j];
            let round_set: BTreeSet<usize> = kept.iter().map(|&(r, _)| r).collect();
            Some(CartelFlag {
                kind: CartelKind::ReciprocalPair,
                score: kept.iter().map(|&(_, s)| s).sum::<f64>() / kept.len() as f64,
                rounds_observed: kept.len(),
                evidence: evidence(ledger, &members, &round_set),
                members,
            })
        })
        .collect()
}

/// Directed graph over agents with the aggregated-share threshold applied.
fn thresholded_graph(
    flows: &RoundFlows,
    pools: &DonationPools,
    edge_share: f64,
) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut sent: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for round in &flows.flows {
        for (&pair, &a) in round {
            *sent.entry(pair).or_insert(0.0) += a;
        }
    }
    let mut pooled: HashMap<usize, f64> = HashMap::new();
    for &(i, _) in sent.keys() {
        pooled
            .entry(i)
            .or_insert_with(|| flows.rounds.iter().map(|&r| pools.pool(r, i)).sum());
    }
    let mut graph: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (&(i, j), &a) in &sent {
        let p = pooled[&i];
        if i != j && p > 0.0 && a / p >= edge_share {
            graph.entry(i).or_default().insert(j);
            graph.entry(j).or_default();
        }
    }
    graph
}

fn closed_groups(
    ledger: &DonationLedger,
    pools: &DonationPools,
    flows: &RoundFlows,
    th: &CartelThresholds,
) -> Vec<CartelFlag> {
    let k_max = th.max_group_size;
    let graph = thresholded_graph(flows, pools, th.internal_share / k_max as f64);
    let mut found: Vec<CartelFlag> = Vec::new();

    for component in strongly_connected_components(&graph) {
        if component.len() < 2 {
            continue;
        }
        let inside: BTreeSet<usize> = component.iter().copied().collect();
        let out: BTreeMap<usize, BTreeSet<usize>> = component
            .iter()
            .map(|&v| (v, graph[&v].intersection(&inside).copied().collect()))
            .collect();
        for_each_connected_subset(&component, &out, k_max, &mut |subset: &[usize]| {
            if subset.len() < 2 || !is_strongly_connected(subset, &graph) {
                return;
            }
            let mut members = subset.to_vec();
            members.sort_unstable();
            let held: Vec<(usize, f64)> = (0..flows.rounds.len())
                .map(|k| (flows.rounds[k], internal_share(flows, pools, k, &members)))
                .filter(|&(_, s)| s >= th.internal_share)
                .collect();
            let kept = persistent_rounds(&held, th.min_rounds);
            if kept.is_empty() {
                return;
            }
            let round_set: BTreeSet<usize> = kept.iter().map(|&(r, _)| r).collect();
            found.push(CartelFlag {
                kind: CartelKind::Group,
                score: kept.iter().map(|&(_, s)| s).sum::<f64>() / kept.len() as f64,
                rounds_observed: kept.len(),
                evidence: evidence(ledger, &members, &round_set),
                members,
            });
        });
    }

    let sets: Vec<BTreeSet<usize>> = found.iter().map(|f| f.members.iter().copied().collect()).collect();
    let mut maximal: Vec<CartelFlag> = found
        .into_iter()
        .enumerate()
        .filter(|(a, _)| !sets.iter().enumerate().any(|(b, s)| *a != b && sets[*a].is_subset(s) && sets[*a] != *s))
        .map(|(_, f)| f)
        .collect();
    maximal.sort_by(|x, y| x.members.cmp(&y.members));
    maximal
}

/// Calls `visit` once for every vertex subset of size up to `max_size` whose
/// members are all reachable from its smallest vertex along `adjacency`
/// (enumeration by exclusive neighbourhood extension). Strongly connected
/// subsets are a special case.
fn for_each_connected_subset(
    vertices: &[usize],
    adjacency: &BTreeMap<usize, BTreeSet<usize>>,
    max_size: usize,
    visit: &mut dyn FnMut(&[usize]),
) {
    fn neighbors(adjacency: &BTreeMap<usize, BTreeSet<usize>>, v: usize) -> impl Iterator<Item = usize> + '_ {
        adjacency.get(&v).into_iter().flatten().copied()
    }

    fn extend(
        subset: &mut Vec<usize>,
        frontier: BTreeSet<usize>,
        root: usize,
        max_size: usize,
        adjacency: &BTreeMap<usize, BTreeSet<usize>>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        visit(subset);
        if subset.len() == max_size {
            return;
        }
        let mut frontier = frontier;
        while let Some(w) = frontier.pop_first() {
            let mut next = frontier.clone();
            for u in neighbors(adjacency, w) {
                if u > root
                    && !subset.contains(&u)
                    && !subset.iter().any(|&s| adjacency.get(&s).is_some_and(|n| n.contains(&u)))
                {
                    next.insert(u);
                }
            }
            subset.push(w);
            extend(subset, next, root, max_size, adjacency, visit);
            subset.pop();
        }
    }

    for &root in vertices {
        let frontier: BTreeSet<usize> = neighbors(adjacency, root).filter(|&u| u > root).collect();
        let mut subset = vec![root];
        extend(&mut subset, frontier, root, max_size, adjacency, visit);
    }
}

fn is_strongly_connected(subset: &[usize], graph: &BTreeMap<usize, BTreeSet<usize>>) -> bool {
    let reach = |forward: bool| {
        let mut seen = BTreeSet::from([subset[0]]);
        let mut stack = vec![subset[0]];
        while let Some(v) = stack.pop() {
            for &w in subset {
                let edge = if forward {
                    graph.get(&v).is_some_and(|s| s.contains(&w))
                } else {
                    graph.get(&w).is_some_and(|s| s.contains(&v))
                };
                if edge && seen.insert(w) {
                    stack.push(w);
                }
            }
        }
        seen.len() == subset.len()
    };
    reach(true) && reach(false)
}

/// Largest community [`detect_cartels_exhaustive`] accepts.
pub const EXHAUSTIVE_LIMIT: usize = 30;

/// Reference implementation of [`detect_cartels`] that checks every subset
/// of up to `max_group_size` agents directly. Returns `(kind, members)`
/// sorted the same way as the detector. Only meant for small communities.
pub fn detect_cartels_exhaustive(
    ledger: &DonationLedger,
    n: usize,
    th: &CartelThresholds,
) -> Result<Vec<(CartelKind, Vec<usize>)>> {
    th.check()?;
    if n > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge { n, limit: EXHAUSTIVE_LIMIT });
    }
    let rounds: Vec<usize> = ledger.rounds().into_iter().collect();
    if rounds.len() < th.min_rounds {
        return Err(Error::InsufficientHistory { have: rounds.len(), need: th.min_rounds });
    }
    let mut flow: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let mut pool: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for t in ledger.records() {
        *flow.entry((t.round, t.donor, t.recipient)).or_default() += t.amount;
        *pool.entry((t.round, t.donor)).or_default() += t.amount;
    }
    let a = |r: usize, i: usize, j: usize| flow.get(&(r, i, j)).copied().unwrap_or(0.0);
    let p = |r: usize, i: usize| pool.get(&(r, i)).copied().unwrap_or(0.0);
    let persists = |held: &[usize]| {
        let (mut best, mut run, mut prev) = (0, 0, None::<usize>);
        for &r in held {
            run = if prev.is_some_and(|q| q + 1 == r) { run + 1 } else { 1 };
            best = best.max(run);
            prev = Some(r);
        }
        best >= th.min_rounds
    };

    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let held: Vec<usize> = rounds
                .iter()
                .copied()
                .filter(|&r| {
                    a(r, i, j) > 0.0
                        && a(r, j, i) > 0.0
                        && p(r, i) > 0.0
                        && p(r, j) > 0.0
                        && (a(r, i, j) / p(r, i)).min(a(r, j, i) / p(r, j)) >= th.pair_reciprocity
                })
                .collect();
            if persists(&held) {
                out.push((CartelKind::ReciprocalPair, vec![i, j]));
            }
        }
    }

    let k = th.max_group_size;
    let matrix: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            let pooled: f64 = rounds.iter().map(|&r| p(r, i)).sum();
            (0..n)
                .map(|j| {
                    let sent: f64 = rounds.iter().map(|&r| a(r, i, j)).sum();
                    pooled > 0.0 && sent / pooled >= th.internal_share / k as f64
                })
                .collect()
        })
        .collect();
    let edge = |i: usize, j: usize| matrix[i][j];
    let strongly_connected = |s: &[usize]| {
        let reach = |forward: bool| {
            let mut seen = BTreeSet::from([s[0]]);
            let mut stack = vec![s[0]];
            while let Some(v) = stack.pop() {
                for &w in s {
                    let e = if forward { edge(v, w) } else { edge(w, v) };
                    if v != w && e && seen.insert(w) {
                        stack.push(w);
                    }
                }
            }
            seen.len() == s.len()
        };
        reach(true) && reach(false)
    };
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut subsets: Vec<Vec<usize>> = Vec::new();
    let mut stack: Vec<Vec<usize>> = (0..n).map(|v| vec![v]).collect();
    while let Some(s) = stack.pop() {
        if s.len() >= 2 {
            subsets.push(s.clone());
        }
        if s.len() < k {
            for v in s[s.len() - 1] + 1..n {
                let mut t = s.clone();
                t.push(v);
                stack.push(t);
            }
        }
    }
    for s in subsets {
        if !strongly_connected(&s) {
            continue;
        }
        let held: Vec<usize> = rounds
            .iter()
            .copied()
            .filter(|&r| {
                let pooled: f64 = s.iter().map(|&i| p(r, i)).sum();
                let mut inside = 0.0;
                for &i in &s {
                    for &j in &s {
                        if i != j {
                            inside += a(r, i, j);
                        }
                    }
                }
                pooled > 0.0 && inside / pooled >= th.internal_share
            })
            .collect();
        if persists(&held) {
            groups.push(s);
        }
    }
    let sets: Vec<BTreeSet<usize>> = groups.iter().map(|g| g.iter().copied().collect()).collect();
    let mut maximal: Vec<Vec<usize>> = groups
        .iter()
        .zip(&sets)
        .filter(|(_, g)| !sets.iter().any(|h| h.len() > g.len() && g.is_subset(h)))
        .map(|(m, _)| m.clone())
        .collect();
    maximal.sort();
    out.extend(maximal.into_iter().map(|m| (CartelKind::Group, m)));
    Ok(out)
}

/// Tarjan's algorithm, iterative. Components come out in reverse topological
/// order; members of each component are sorted.
pub fn strongly_connected_components(graph: &BTreeMap<usize, BTreeSet<usize>>) -> Vec<Vec<usize>> {
    let nodes: Vec<usize> = graph.keys().copied().collect();
    let slot: HashMap<usize, usize> = nodes.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let succ: Vec<Vec<usize>> = nodes
        .iter()
        .map(|v| graph[v].iter().filter_map(|w| slot.get(w).copied()).collect())
        .collect();

    const UNSEEN: usize = usize::MAX;
    let n = nodes.len();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next_index = 0;
    let mut out = Vec::new();

    for start in 0..n {
        if index[start] != UNSEEN {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(start, 0)];
        index[start] = next_index;
        low[start] = next_index;
        next_index += 1;
        stack.push(start);
        on_stack[start] = true;

        while let Some(&mut (v, ref mut edge)) = call.last_mut() {
            if *edge < succ[v].len() {
                let w = succ[v][*edge];
                *edge += 1;
                if index[w] == UNSEEN {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut component = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack");
                    on_stack[w] = false;
                    component.push(nodes[w]);
                    if w == v {
                        break;
                    }
                }
                component.sort_unstable();
                out.push(component);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyPolicy {
    VoidAndRedistribute,
    ZeroInternalWeights,
}

/// Voids every flagged member's weight on fellow members and renormalizes.
pub fn apply_penalties(
    plan: &AllocationPlan,
    flags: &[CartelFlag],
    _policy: PenaltyPolicy,
) -> Result<AllocationPlan> {
    // Both policies mask identically for now.
    let mut banned: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for flag in flags {
        for &i in &flag.members {
            if i >= plan.len() {
                return Err(Error::validation("cartel member not in plan", vec![format!("#{i}")]));
            }
            banned.entry(i).or_default().extend(flag.members.iter().filter(|&&j| j != i));
        }
    }
    let rows = plan
        .rows()
        .iter()
        .enumerate()
        .map(|(donor, row)| {
            let Some(ban) = banned.get(&donor) else {
                return Ok(row.clone());
            };
            if row.is_empty() {
                return Ok(Vec::new());
            }
            let kept: Vec<(usize, f64)> = row.iter().copied().filter(|(j, _)| !ban.contains(j)).collect();
            if kept.is_empty() {
                Err(Error::EmptyRow {
                    donor: format!("#{donor}"),
                })
            } else {
                Ok(normalize_row(kept))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    AllocationPlan::new(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictedTransfer {
    pub round: usize,
    pub donor_id: String,
    pub recipient_id: String,
    pub amount: f64,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub round: usize,
    pub donor_id: String,
    pub recipient_id: String,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartelFlagReport {
    pub kind: CartelKind,
    pub members: Vec<String>,
    pub score: f64,
    pub rounds_observed: usize,
    pub evidence: Vec<EvidenceRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrityTotals {
    pub transfers: usize,
    pub rounds: usize,
    pub amount: f64,
    pub conflicted_transfers: usize,
    pub conflicted_amount: f64,
    pub cartel_flags: usize,
}

/// Contents of `integrity_report.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub conflicted_transfers: Vec<ConflictedTransfer>,
    pub cartel_flags: Vec<CartelFlagReport>,
    pub totals: IntegrityTotals,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl IntegrityReport {
    pub fn has_violations(&self) -> bool {
        !self.conflicted_transfers.is_empty() || !self.cartel_flags.is_empty()
    }
}

pub fn flag_report(flag: &CartelFlag, community: &Community) -> CartelFlagReport {
    let mut members: Vec<String> = flag.members.iter().map(|&i| community.id(i).to_string()).collect();
    members.sort();
    CartelFlagReport {
        kind: flag.kind,
        members,
        score: flag.score,
        rounds_observed: flag.rounds_observed,
        evidence: flag
            .evidence
            .iter()
            .map(|t| EvidenceRecord {
                round: t.round,
                donor_id: community.id(t.donor).to_string(),
                recipient_id: community.id(t.recipient).to_string(),
                amount: t.amount,
            })
            .collect(),
    }
}

/// Checks every transfer against the conflict set and looks for cartels.
/// Pools are reconstructed from the ledger itself. Too short a history
/// skips cartel detection with a note instead of failing.
pub fn audit(
    community: &Community,
    ledger: &DonationLedger,
    conflicts: &ConflictSet,
    thresholds: &CartelThresholds,
) -> Result<IntegrityReport> {
    let mut report = IntegrityReport::default();
    for t in ledger.records() {
        if let Some(reasons) = conflicts.reasons(t.donor, t.recipient) {
            report.conflicted_transfers.push(ConflictedTransfer {
                round: t.round,
                donor_id: community.id(t.donor).to_string(),
                recipient_id: community.id(t.recipient).to_string(),
                amount: t.amount,
                reasons: reasons.labels().into_iter().map(String::from).collect(),
            });
        }
    }
    let pools = DonationPools::from_ledger(ledger, community.len());
    match detect_cartels(ledger, &pools, thresholds) {
        Ok(flags) => {
            report.cartel_flags = flags.iter().map(|f| flag_report(f, community)).collect();
        }
        Err(Error::InsufficientHistory { have, need }) => report.notes.push(format!(
            "cartel detection skipped: {have} round(s) in ledger, {need} required"
        )),
        Err(e) => return Err(e),
    }
    report.totals = IntegrityTotals {
        transfers: ledger.len(),
        rounds: ledger.rounds().len(),
        amount: ledger.total(),
        conflicted_transfers: report.conflicted_transfers.len(),
        conflicted_amount: report.conflicted_transfers.iter().map(|t| t.amount).sum(),
        cartel_flags: report.cartel_flags.len(),
    };
    Ok(report)
}
