#![allow(dead_code)]

use proptest::prelude::*;
use sofa::mechanism::AllocationPlan;
use sofa::population::{Agent, Community};

/// A random sparse instance: plan rows with 1..=4 recipients, fractions and
/// base amounts. Agents listed in `sinks` donate nothing.
#[derive(Debug, Clone)]
pub struct Instance {
    pub plan: AllocationPlan,
    pub fractions: Vec<f64>,
    pub base: Vec<f64>,
}

impl Instance {
    pub fn budget(&self) -> f64 {
        self.base.iter().sum()
    }
}

pub fn instance(max_n: usize, max_f: f64) -> impl Strategy<Value = Instance> {
    (2..=max_n).prop_flat_map(move |n| {
        let rows = prop::collection::vec(
            prop::collection::vec((0..n, 0.05f64..1.0), 1..=4),
            n,
        );
        let fractions = prop::collection::vec(0.0..max_f, n);
        let base = prop::collection::vec(0.1f64..10.0, n);
        (rows, fractions, base).prop_map(move |(rows, fractions, base)| {
            let rows: Vec<Vec<(usize, f64)>> = rows
                .into_iter()
                .enumerate()
                .map(|(i, row)| {
                    let mut row: Vec<(usize, f64)> = row
                        .into_iter()
                        .filter(|&(j, _)| j != i)
                        .collect::<std::collections::BTreeMap<_, _>>()
                        .into_iter()
                        .collect();
                    if row.is_empty() {
                        row.push(((i + 1) % n, 1.0));
                    }
                    row
                })
                .collect();
            Instance {
                plan: AllocationPlan::from_weights(rows).expect("valid random plan"),
                fractions,
                base,
            }
        })
    })
}

pub fn plain_community(n: usize) -> Community {
    let width = n.to_string().len();
    Community::new(
        (1..=n)
            .map(|i| Agent::scientist(format!("agent-{i:0width$}"), "d").with_affiliation(format!("aff-{i}")))
            .collect(),
        vec![],
    )
    .expect("valid community")
}
