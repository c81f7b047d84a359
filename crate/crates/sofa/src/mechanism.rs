//! Base grants, donation rounds and the stationary funding distribution.
//!
//! Every round each agent holds an incoming total
//!
//! ```text
//! T'_j = β_j + Σ_i w_ij · f_i · T_i
//! ```
//!
//! made of its base grant `β_j` plus what donors passed on from their own
//! totals of the previous round. It keeps `(1 − f_j)·T'_j` and passes the rest
//! on. Starting from `T⁰ = β`, repeating the round is power iteration on
//! `Wᵀ·diag(f)`, which contracts in the L1 norm by at least `max f`; the
//! limit `T* = (I − Wᵀ·diag(f))⁻¹ β` is what [`run_fixed_point`] converges
//! to and what [`closed_form_totals`] solves for directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrity::{DonationLedger, Transfer};
use crate::population::Community;

/// One donor's split: `(recipient position, weight)`, sorted by recipient.
pub type PlanRow = Vec<(usize, f64)>;

/// Tolerance on per-row weight sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Largest population [`closed_form_totals`] will factor densely.
pub const DENSE_SOLVE_LIMIT: usize = 5000;

/// Row-stochastic donation weights. An empty row means the agent does not
/// donate, which is only legal for agents whose donation fraction is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    rows: Vec<PlanRow>,
}

impl AllocationPlan {
    /// Validates rows that are already normalized.
    pub fn new(rows: Vec<PlanRow>) -> Result<Self> {
        let n = rows.len();
        let mut rows = rows;
        for (donor, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::validation(
                    "plan row lists a recipient twice",
                    vec![format!("#{donor}")],
                ));
            }
            if row.is_empty() {
                continue;
            }
            if let Some(&(j, w)) = row
                .iter()
                .find(|&&(j, w)| j >= n || j == donor || !(w.is_finite() && w > 0.0))
            {
                let why = if j >= n {
                    "recipient out of range"
                } else if j == donor {
                    "self-allocation"
                } else {
                    "weights must be positive"
                };
                return Err(Error::validation(
                    format!("{why} (weight {w})"),
                    vec![format!("#{donor}->#{j}")],
                ));
            }
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::validation(
                    format!("row weights sum to {sum}, expected 1"),
                    vec![format!("#{donor}")],
                ));
            }
        }
        Ok(AllocationPlan { rows })
    }

    /// Builds a plan from nonnegative, unnormalized weights. Zero weights are
    /// dropped and each row is scaled to sum to one.
    pub fn from_weights(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let rows = rows.into_iter().map(normalize_row).collect();
        AllocationPlan::new(rows)
    }

    /// Plan with no donations at all.
    pub fn empty(n: usize) -> Self {
        AllocationPlan {
            rows: vec![Vec::new(); n],
        }
    }

    /// Every agent splits evenly over everyone else.
    pub fn uniform(n: usize) -> Self {
        let rows = (0..n)
            .map(|i| {
                let w = 1.0 / (n - 1) as f64;
                (0..n).filter(|&j| j != i).map(|j| (j, w)).collect()
            })
            .collect();
        AllocationPlan { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, donor: usize) -> &[(usize, f64)] {
        &self.rows[donor]
    }

    pub fn rows(&self) -> &[PlanRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<PlanRow> {
        self.rows
    }

    pub fn weight(&self, donor: usize, recipient: usize) -> f64 {
        self.rows[donor]
            .binary_search_by_key(&recipient, |&(j, _)| j)
            .map(|k| self.rows[donor][k].1)
            .unwrap_or(0.0)
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Every agent that must donate has somewhere to send the money.
    pub fn check_covers(&self, fractions: &[f64]) -> Result<()> {
        check_len("fractions", fractions.len(), self.len())?;
        match fractions
            .iter()
            .enumerate()
            .find(|&(i, &f)| f > 0.0 && self.rows[i].is_empty())
        {
            Some((i, _)) => Err(Error::EmptyRow {
                donor: format!("#{i}"),
            }),
            None => Ok(()),
        }
    }
}

/// Drops nonpositive weights and rescales the rest to sum to one.
pub fn normalize_row(row: Vec<(usize, f64)>) -> PlanRow {
    let mut row: PlanRow = row.into_iter().filter(|&(_, w)| w > 0.0).collect();
    row.sort_by_key(|&(j, _)| j);
    let sum: f64 = row.iter().map(|&(_, w)| w).sum();
    for entry in &mut row {
        entry.1 /= sum;
    }
    row
}

/// Funding of every agent in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct FundingState {
    pub round_index: usize,
    /// `T`: base grant plus donations received.
    pub incoming_total: Vec<f64>,
    /// `R = (1 − f)·T`.
    pub retained: Vec<f64>,
    /// `f·T`, passed on to others.
    pub donated_pool: Vec<f64>,
    pub base_vector: Vec<f64>,
}

impl FundingState {
    pub fn from_totals(
        round_index: usize,
        totals: Vec<f64>,
        fractions: &[f64],
        base: &[f64],
    ) -> Result<Self> {
        check_len("fractions", fractions.len(), totals.len())?;
        check_len("base vector", base.len(), totals.len())?;
        if let Some(i) = totals.iter().position(|&t| t.is_nan() || t < 0.0) {
            return Err(Error::validation(
                format!("incoming total {} is negative", totals[i]),
                vec![format!("#{i}")],
            ));
        }
        let donated_pool: Vec<f64> = totals.iter().zip(fractions).map(|(t, f)| f * t).collect();
        Ok(FundingState {
            round_index,
            retained: retained(&totals, fractions)?,
            incoming_total: totals,
            donated_pool,
            base_vector: base.to_vec(),
        })
    }

    /// Round zero: only the base grants.
    pub fn initial(base: &[f64], fractions: &[f64]) -> Result<Self> {
        FundingState::from_totals(0, base.to_vec(), fractions, base)
    }

    pub fn budget(&self) -> f64 {
        self.base_vector.iter().sum()
    }

    pub fn retained_sum(&self) -> f64 {
        self.retained.iter().sum()
    }

    pub fn donated_sum(&self) -> f64 {
        self.donated_pool.iter().sum()
    }
}

/// `R_i = (1 − f_i)·T_i`.
pub fn retained(totals: &[f64], fractions: &[f64]) -> Result<Vec<f64>> {
    check_len("fractions", fractions.len(), totals.len())?;
    Ok(totals
        .iter()
        .zip(fractions)
        .map(|(t, f)| (1.0 - f) * t)
        .collect())
}

/// One donation round. The transfers that make up the new round's receipts
/// are appended to `ledger` under the new round index.
pub fn donation_step(
    prev: &FundingState,
    plan: &AllocationPlan,
    fractions: &[f64],
    base: &[f64],
    ledger: &mut DonationLedger,
) -> Result<FundingState> {
    let n = prev.incoming_total.len();
    check_len("plan", plan.len(), n)?;
    check_len("base vector", base.len(), n)?;
    check_fractions(fractions, n)?;
    plan.check_covers(fractions)?;
    if let Some(i) = prev.incoming_total.iter().position(|&t| t.is_nan() || t < 0.0) {
        return Err(Error::validation(
            format!("incoming total {} is negative", prev.incoming_total[i]),
            vec![format!("#{i}")],
        ));
    }

    let round = prev.round_index + 1;
    let mut next = base.to_vec();
    for (donor, row) in plan.rows().iter().enumerate() {
        let pool = fractions[donor] * prev.incoming_total[donor];
        if pool <= 0.0 {
            continue;
        }
        for &(recipient, w) in row {
            let amount = w * pool;
            next[recipient] += amount;
            ledger.push(Transfer {
                round,
                donor,
                recipient,
                amount,
            });
        }
    }
    FundingState::from_totals(round, next, fractions, base)
}

/// Outcome of iterating rounds to a stationary point.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub totals: Vec<f64>,
    pub retained: Vec<f64>,
    pub iterations: usize,
    /// `‖T_k − T_{k−1}‖₁ / B` after each iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl FixedPointResult {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }

    pub fn to_state(&self, round_index: usize, fractions: &[f64], base: &[f64]) -> Result<FundingState> {
        FundingState::from_totals(round_index, self.totals.clone(), fractions, base)
    }
}

/// Iterates `T ← β + Wᵀ·diag(f)·T` from `T⁰ = β` until the L1 change,
/// normalized by the budget, falls to `tolerance`.
///
/// Running out of iterations is not an error: the result comes back with
/// `converged == false` and the caller decides.
pub fn run_fixed_point(
    plan: &AllocationPlan,
    fractions: &[f64],
    base: &[f64],
    tolerance: f64,
    max_iter: usize,
) -> Result<FixedPointResult> {
    let n = base.len();
    check_len("plan", plan.len(), n)?;
    check_fractions(fractions, n)?;
    plan.check_covers(fractions)?;
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::config("/policy/tolerance", "must be > 0"));
    }
    if max_iter == 0 {
        return Err(Error::config("/policy/max_iter", "must be >= 1"));
    }
    let budget = check_base(base)?;

    let mut totals = base.to_vec();
    let mut next = vec![0.0; n];
    let mut residual_history = Vec::new();
    let mut converged = false;
    while residual_history.len() < max_iter {
        next.copy_from_slice(base);
        for (donor, row) in plan.rows().iter().enumerate() {
            let pool = fractions[donor] * totals[donor];
            if pool == 0.0 {
                continue;
            }
            for &(recipient, w) in row {
                next[recipient] += w * pool;
            }
        }
        let change: f64 = next.iter().zip(&totals).map(|(a, b)| (a - b).abs()).sum();
        let residual = change / budget;
        std::mem::swap(&mut totals, &mut next);
        residual_history.push(residual);
        if residual <= tolerance {
            converged = true;
            break;
        }
    }

    Ok(FixedPointResult {
        retained: retained(&totals, fractions)?,
        totals,
        iterations: residual_history.len(),
        residual_history,
        converged,
    })
}

/// Stationary totals by dense LU factorization of `I − Wᵀ·diag(f)`.
///
/// Independent of [`run_fixed_point`]; intended for verification on
/// populations up to [`DENSE_SOLVE_LIMIT`].
pub fn closed_form_totals(plan: &AllocationPlan, fractions: &[f64], base: &[f64]) -> Result<Vec<f64>> {
    let n = base.len();
    if n > DENSE_SOLVE_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: DENSE_SOLVE_LIMIT,
        });
    }
    check_len("plan", plan.len(), n)?;
    check_fractions(fractions, n)?;
    plan.check_covers(fractions)?;

    let mut system = DMatrix::<f64>::identity(n, n);
    for (donor, row) in plan.rows().iter().enumerate() {
        for &(recipient, w) in row {
            system[(recipient, donor)] -= w * fractions[donor];
        }
    }
    let rhs = DVector::from_column_slice(base);
    system
        .lu()
        .solve(&rhs)
        .map(|x| x.iter().copied().collect())
        .ok_or_else(|| Error::Singular("I - W^T diag(f) is not invertible".into()))
}

/// A rule for rewriting plans once interim totals are published.
pub trait PlanRevision {
    fn revise(
        &self,
        community: &Community,
        interim_totals: &[f64],
        phase1_plan: &AllocationPlan,
    ) -> Result<AllocationPlan>;
}

/// Keeps the phase-one plan unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeepPlan;

impl PlanRevision for KeepPlan {
    fn revise(&self, _: &Community, _: &[f64], phase1_plan: &AllocationPlan) -> Result<AllocationPlan> {
        Ok(phase1_plan.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseOutcome {
    pub interim: FixedPointResult,
    pub phase2_plan: AllocationPlan,
    pub final_result: FixedPointResult,
}

/// Donation round, publication of the interim totals, then a second round
/// under revised plans.
#[allow(clippy::too_many_arguments)]
pub fn two_phase_round(
    community: &Community,
    phase1_plan: &AllocationPlan,
    revision: &dyn PlanRevision,
    fractions: &[f64],
    base: &[f64],
    tolerance: f64,
    max_iter: usize,
) -> Result<TwoPhaseOutcome> {
    let interim = require_converged(run_fixed_point(phase1_plan, fractions, base, tolerance, max_iter)?)?;
    let phase2_plan = revision.revise(community, &interim.totals, phase1_plan)?;
    check_len("revised plan", phase2_plan.len(), base.len())?;
    let final_result =
        require_converged(run_fixed_point(&phase2_plan, fractions, base, tolerance, max_iter)?)?;
    Ok(TwoPhaseOutcome {
        interim,
        phase2_plan,
        final_result,
    })
}

fn require_converged(result: FixedPointResult) -> Result<FixedPointResult> {
    if result.converged {
        Ok(result)
    } else {
        Err(Error::NotConverged {
            iterations: result.iterations,
            residual: result.final_residual(),
        })
    }
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what} has length {got}, expected {expected}")))
    }
}

fn check_fractions(fractions: &[f64], n: usize) -> Result<()> {
    check_len("fractions", fractions.len(), n)?;
    match fractions.iter().position(|f| !(0.0..1.0).contains(f)) {
        Some(i) => Err(Error::validation(
            format!("donation fraction {} outside [0, 1)", fractions[i]),
            vec![format!("#{i}")],
        )),
        None => Ok(()),
    }
}

fn check_base(base: &[f64]) -> Result<f64> {
    if let Some(i) = base.iter().position(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(Error::validation(
            format!("base grant {} is negative", base[i]),
            vec![format!("#{i}")],
        ));
    }
    let budget: f64 = base.iter().sum();
    if budget > 0.0 {
        Ok(budget)
    } else {
        Err(Error::EmptyPopulation("total base funding is zero".into()))
    }
}
