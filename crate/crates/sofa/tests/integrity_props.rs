mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{instance, plain_community};
use proptest::prelude::*;
use sofa::integrity::{
    audit, detect_cartels, detect_cartels_exhaustive, mask_plan, CartelKind, CartelThresholds, ConflictSet, DonationLedger, DonationPools,
    Transfer,
};
use sofa::population::{AgentId, CommunitySpec};
use sofa::simulation::{CartelPattern, CommunitySource, Scenario, ScenarioConfig, Strategy, StrategyAssignment};

fn conflicts_from(n: usize, pairs: &[(usize, usize)]) -> ConflictSet {
    let mut c = ConflictSet::new(n);
    for &(i, j) in pairs {
        if i != j && i < n && j < n {
            c.insert_coauthor(i, j);
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn masking_removes_conflicts_and_is_idempotent(
        inst in instance(20, 0.9),
        pairs in prop::collection::vec((0usize..20, 0usize..20), 0..30),
    ) {
        let n = inst.base.len();
        let conflicts = conflicts_from(n, &pairs);
        let masked = match mask_plan(&inst.plan, &conflicts) {
            Ok(p) => p,
            Err(_) => return Ok(()),
        };
        for (i, row) in masked.rows().iter().enumerate() {
            prop_assert!(row.iter().all(|&(j, _)| !conflicts.contains(i, j)));
            let s: f64 = row.iter().map(|&(_, w)| w).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert_eq!(mask_plan(&masked, &conflicts).unwrap(), masked);
    }
}

/// Random multi-round ledger from low-degree plans, so small closed groups
/// are common.
fn random_ledger(n: usize, rounds: usize, seed: u64) -> DonationLedger {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut plans: Vec<Vec<Vec<(usize, f64)>>> = Vec::new();
    for _ in 0..2 {
        let plan = (0..n)
            .map(|i| {
                let degree = rng.random_range(1..=3);
                let mut row: BTreeMap<usize, f64> = BTreeMap::new();
                while row.len() < degree {
                    let j = rng.random_range(0..n);
                    if j != i {
                        row.insert(j, rng.random_range(0.1..1.0));
                    }
                }
                let s: f64 = row.values().sum();
                row.into_iter().map(|(j, w)| (j, w / s)).collect()
            })
            .collect();
        plans.push(plan);
    }
    let mut ledger = DonationLedger::default();
    for round in 1..=rounds {
        let plan = &plans[usize::from(rng.random_bool(0.3))];
        for (donor, row) in plan.iter().enumerate() {
            let pool: f64 = rng.random_range(0.5..2.0);
            for &(recipient, w) in row {
                ledger.push(Transfer { round, donor, recipient, amount: w * pool });
            }
        }
    }
    ledger
}

#[test]
fn detector_matches_exhaustive_oracle() {
    let mut checked = 0;
    let mut nonempty = 0;
    for seed in 0..60u64 {
        let n = 6 + (seed as usize * 7) % 25;
        let ledger = random_ledger(n, 4, seed);
        for (k, internal, min_rounds) in [(2, 0.6, 1), (3, 0.6, 2), (4, 0.5, 2), (4, 0.8, 3)] {
            let th = CartelThresholds {
                pair_reciprocity: 0.5,
                internal_share: internal,
                max_group_size: k,
                min_rounds,
            };
            let pools = DonationPools::from_ledger(&ledger, n);
            let flags = detect_cartels(&ledger, &pools, &th).unwrap();
            let pairs: BTreeSet<Vec<usize>> = flags
                .iter()
                .filter(|f| f.kind == CartelKind::ReciprocalPair)
                .map(|f| f.members.clone())
                .collect();
            let groups: BTreeSet<Vec<usize>> =
                flags.iter().filter(|f| f.kind == CartelKind::Group).map(|f| f.members.clone()).collect();
            let reference = detect_cartels_exhaustive(&ledger, n, &th).unwrap();
            let want_pairs: BTreeSet<Vec<usize>> = reference
                .iter()
                .filter(|(kind, _)| *kind == CartelKind::ReciprocalPair)
                .map(|(_, m)| m.clone())
                .collect();
            let want_groups: BTreeSet<Vec<usize>> =
                reference.iter().filter(|(kind, _)| *kind == CartelKind::Group).map(|(_, m)| m.clone()).collect();
            assert_eq!(pairs, want_pairs, "pairs, seed {seed}, n {n}, {th:?}");
            assert_eq!(groups, want_groups, "groups, seed {seed}, n {n}, {th:?}");
            checked += 1;
            nonempty += usize::from(!groups.is_empty());
        }
    }
    assert_eq!(checked, 240);
    assert!(nonempty > 20, "oracle comparison saw too few groups: {nonempty}");
}

/// Flagged member sets of a scenario with one planted cartel.
fn planted_run(seed: u64) -> (BTreeSet<Vec<String>>, Vec<String>) {
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    let n = 60;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let size = rng.random_range(2..=5);
    let mut ids: Vec<String> = (1..=n).map(|i| format!("agent-{i:02}")).collect();
    ids.shuffle(&mut rng);
    let mut members: Vec<String> = ids[..size].to_vec();
    let pattern = if rng.random_bool(0.5) { CartelPattern::Ring } else { CartelPattern::Clique };
    let strategy = Strategy::Cartel {
        members: members.iter().map(|s| AgentId::new(s.as_str())).collect(),
        internal_share: 0.8,
        out_degree: 10,
        pattern,
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
    let result = Scenario::prepare(&config).unwrap().run().unwrap();
    members.sort();
    let flagged = result.integrity.cartel_flags.iter().map(|f| f.members.clone()).collect();
    (flagged, members)
}

#[test]
fn planted_cartels_recovered_exactly() {
    for seed in 0..50 {
        let (flagged, planted) = planted_run(seed);
        assert_eq!(flagged, BTreeSet::from([planted]), "seed {seed}");
    }
}

#[test]
fn audit_reports_planted_conflict() {
    let community = plain_community(4);
    let conflicts = conflicts_from(4, &[(0, 1)]);
    let ledger = DonationLedger::new(vec![
        Transfer { round: 1, donor: 0, recipient: 2, amount: 1.0 },
        Transfer { round: 1, donor: 0, recipient: 1, amount: 0.5 },
    ]);
    let report = audit(&community, &ledger, &conflicts, &CartelThresholds::default()).unwrap();
    assert_eq!(report.conflicted_transfers.len(), 1);
    assert_eq!(report.conflicted_transfers[0].recipient_id, "agent-2");
    assert!(report.has_violations());
    assert_eq!(report.notes.len(), 1);
}
