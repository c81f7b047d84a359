//! Inequality, concentration and cost metrics.
//!
//! Inequality is measured on retained funds, the money each scientist keeps
//! after donating. Sorting ties are broken by agent position so every curve
//! is reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::Community;

/// Lorenz curves on larger populations are thinned to this many segments.
pub const LORENZ_MAX_SEGMENTS: usize = 1000;

/// Percentiles reported in [`MetricsReport::top_shares`].
pub const TOP_PERCENTS: [f64; 4] = [1.0, 10.0, 20.0, 50.0];

fn check(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Undefined("inequality of an empty vector".into()));
    }
    if let Some(v) = x.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Undefined(format!("negative or non-finite value {v}")));
    }
    let total: f64 = x.iter().sum();
    if total > 0.0 {
        Ok(total)
    } else {
        Err(Error::Undefined("all values are zero".into()))
    }
}

fn ascending(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    order.into_iter().map(|i| x[i]).collect()
}

/// `G = Σ_i (2i − N − 1)·x_(i) / (N·Σx)` over ascending `x`, `i` from 1.
pub fn gini(x: &[f64]) -> Result<f64> {
    let total = check(x)?;
    let n = x.len() as f64;
    // Sum over gaps between consecutive sorted values; equal values give exactly 0.
    let weighted: f64 = ascending(x)
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let k = i as f64 + 1.0;
            k * (n - k) * (w[1] - w[0])
        })
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// Points `(k/N, share held by the poorest k)` for `k = 0..=N`.
pub fn lorenz(x: &[f64]) -> Result<Vec<(f64, f64)>> {
    let total = check(x)?;
    let n = x.len();
    let mut points = Vec::with_capacity(n + 1);
    points.push((0.0, 0.0));
    let mut acc = 0.0;
    for (k, v) in ascending(x).into_iter().enumerate() {
        acc += v;
        points.push(((k + 1) as f64 / n as f64, acc / total));
    }
    if let Some(last) = points.last_mut() {
        *last = (1.0, 1.0);
    }
    Ok(points)
}

/// [`lorenz`] thinned to at most `max_segments + 1` evenly spaced points.
pub fn lorenz_sampled(x: &[f64], max_segments: usize) -> Result<Vec<(f64, f64)>> {
    let full = lorenz(x)?;
    let n = full.len() - 1;
    if n <= max_segments {
        return Ok(full);
    }
    Ok((0..=max_segments)
        .map(|s| full[(s * n + max_segments / 2) / max_segments])
        .collect())
}

/// Share held by the richest `⌈k·N/100⌉` agents.
pub fn top_share(x: &[f64], percent: f64) -> Result<f64> {
    let total = check(x)?;
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Undefined(format!("top share of {percent}%")));
    }
    let n = x.len();
    let count = ((percent * n as f64 / 100.0).ceil() as usize).clamp(1, n);
    if count == n {
        return Ok(1.0);
    }
    let top: f64 = ascending(x).iter().rev().take(count).sum();
    Ok((top / total).min(1.0))
}

/// Share of the total held by agents carrying each tag present in the
/// community.
pub fn per_group_shares(x: &[f64], community: &Community) -> Result<BTreeMap<String, f64>> {
    let total = check(x)?;
    if x.len() != community.len() {
        return Err(Error::Dimension(format!(
            "vector has length {}, community has {} agents",
            x.len(),
            community.len()
        )));
    }
    let mut shares: BTreeMap<String, f64> = BTreeMap::new();
    for (agent, v) in community.agents().iter().zip(x) {
        for tag in &agent.group_tags {
            *shares.entry(tag.clone()).or_insert(0.0) += v;
        }
    }
    for v in shares.values_mut() {
        *v /= total;
    }
    Ok(shares)
}

/// Share of the total held by the given positions.
pub fn subset_share(x: &[f64], members: &[usize]) -> Result<f64> {
    let total = check(x)?;
    Ok(members.iter().map(|&i| x[i]).sum::<f64>() / total)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gini: f64,
    pub lorenz: Vec<[f64; 2]>,
    pub top_shares: BTreeMap<String, f64>,
    pub per_group_shares: BTreeMap<String, f64>,
    pub convergence: ConvergenceSummary,
    /// Equal split of the same budget over scientists, for comparison.
    pub baseline_equal_split: Vec<f64>,
    pub baseline_gini: f64,
    pub total_retained: f64,
}

pub fn percent_key(p: f64) -> String {
    format!("{p}%")
}

pub fn metrics_report(
    retained: &[f64],
    community: &Community,
    convergence: ConvergenceSummary,
) -> Result<MetricsReport> {
    let total: f64 = check(retained)?;
    let scientists = community.scientist_count().max(1) as f64;
    let baseline_equal_split: Vec<f64> = community
        .agents()
        .iter()
        .map(|a| if a.is_scientist() { total / scientists } else { 0.0 })
        .collect();
    let mut top_shares = BTreeMap::new();
    for p in TOP_PERCENTS {
        top_shares.insert(percent_key(p), top_share(retained, p)?);
    }
    Ok(MetricsReport {
        gini: gini(retained)?,
        lorenz: lorenz_sampled(retained, LORENZ_MAX_SEGMENTS)?
            .into_iter()
            .map(|(p, s)| [p, s])
            .collect(),
        top_shares,
        per_group_shares: per_group_shares(retained, community)?,
        convergence,
        baseline_gini: gini(&baseline_equal_split)?,
        baseline_equal_split,
        total_retained: total,
    })
}

/// Inputs of the application-overhead calculator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    #[serde(default)]
    pub n_applications: u64,
    #[serde(default)]
    pub cost_per_application: f64,
    #[serde(default)]
    pub baseline_grant: f64,
    #[serde(default)]
    pub funds_distributed: f64,
    /// Value of the time spent on applications that were not funded.
    #[serde(default)]
    pub time_cost_unsuccessful: f64,
    #[serde(default)]
    pub currency: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_applications: u64,
    pub cost_per_application: f64,
    pub total_application_cost: f64,
    pub baseline_grant: f64,
    pub application_cost_exceeds_baseline: bool,
    pub funds_distributed: f64,
    pub time_cost_unsuccessful: f64,
    /// Unsuccessful-application time cost per unit of funding distributed.
    pub overhead_ratio: f64,
    pub currency: String,
}

pub fn cost_model(params: &CostParams) -> Result<CostReport> {
    let amounts = [
        ("cost_per_application", params.cost_per_application),
        ("baseline_grant", params.baseline_grant),
        ("funds_distributed", params.funds_distributed),
        ("time_cost_unsuccessful", params.time_cost_unsuccessful),
    ];
    if let Some((name, v)) = amounts.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::config(format!("/{name}"), format!("must be >= 0, got {v}")));
    }
    let overhead_ratio = if params.funds_distributed > 0.0 {
        params.time_cost_unsuccessful / params.funds_distributed
    } else if params.time_cost_unsuccessful == 0.0 {
        0.0
    } else {
        return Err(Error::Undefined(
            "overhead ratio with zero funds distributed".into(),
        ));
    };
    Ok(CostReport {
        n_applications: params.n_applications,
        cost_per_application: params.cost_per_application,
        total_application_cost: params.n_applications as f64 * params.cost_per_application,
        baseline_grant: params.baseline_grant,
        application_cost_exceeds_baseline: params.cost_per_application > params.baseline_grant,
        funds_distributed: params.funds_distributed,
        time_cost_unsuccessful: params.time_cost_unsuccessful,
        overhead_ratio,
        currency: params.currency.clone(),
    })
}

/// A named set of cost inputs, as stored in cost case files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostCase {
    pub name: String,
    #[serde(default)]
    pub note: String,
    pub params: CostParams,
}
