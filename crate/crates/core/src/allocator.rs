//! Deterministic search allocator: a non-learning reference for power and
//! common-rate decisions at a fixed pose and lens selection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp_env::fit_common_split;
use crate::precoding::BeamAssignment;
use crate::rsma_rates::{oma_from_gains, report_from_gains, CommonRateSplit, GainTable, PowerAllocation, RateOptions, RateReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Common-power fractions tried are `i / common_levels` for `i < common_levels`.
    pub common_levels: usize,
    /// Coordinate-ascent sweeps over the private powers.
    pub rounds: usize,
    /// Multiplicative moves tried per user and sweep.
    pub factors: Vec<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { common_levels: 10, rounds: 3, factors: vec![0.0, 0.25, 0.5, 2.0, 4.0] }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.common_levels == 0 {
            return Err(Error::config("search.common_levels", "must be positive"));
        }
        if self.factors.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::config("search.factors", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub power: PowerAllocation,
    pub split: CommonRateSplit,
    pub report: RateReport,
}

/// Full-budget allocation from private weights and a common fraction.
fn allocation(template: &PowerAllocation, assignment: &BeamAssignment, weights: &[f64], common: f64) -> PowerAllocation {
    let mut a = template.clone();
    a.p_private.fill(0.0);
    let budget = a.transmit_budget().max(0.0);
    let total: f64 = weights.iter().sum();
    // With every private weight at zero the whole budget goes to the common stream.
    let common = if total > 0.0 { common } else { 1.0 };
    for (j, k) in assignment.served_pairs() {
        a.p_private[(j, k)] = if total > 0.0 { budget * (1.0 - common) * weights[k] / total } else { 0.0 };
    }
    a.p_common = budget * common;
    while !a.satisfies_budget() {
        a.p_private *= 1.0 - 1e-12;
        a.p_common *= 1.0 - 1e-12;
    }
    a
}

fn equal_shares(assignment: &BeamAssignment) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(assignment.n_beams, assignment.n_users());
    for (j, k) in assignment.served_pairs() {
        w[(j, k)] = 1.0;
    }
    w
}

/// Coordinate ascent over private weights for a fixed objective.
fn ascend(n_users: usize, search: &SearchConfig, start: Vec<f64>, mut objective: impl FnMut(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let mut w = start;
    let mut best = objective(&w);
    for _ in 0..search.rounds {
        let mut improved = false;
        for k in 0..n_users {
            let base = w[k];
            let mut best_k = base;
            for &f in &search.factors {
                let cand = if base > 0.0 { base * f } else { f };
                if cand == best_k {
                    continue;
                }
                w[k] = cand;
                let v = objective(&w);
                if v > best {
                    best = v;
                    best_k = cand;
                    improved = true;
                }
            }
            w[k] = best_k;
        }
        if !improved {
            break;
        }
    }
    (w, best)
}

/// Best sum-SE RSMA allocation over common fractions and private weights, with
/// the common rate split equally and fitted to the decodable rate.
pub fn optimize_rsma(
    gains: &GainTable,
    assignment: &BeamAssignment,
    template: &PowerAllocation,
    noise: f64,
    opts: &RateOptions,
    search: &SearchConfig,
) -> Result<Allocation> {
    search.validate()?;
    let k = assignment.n_users();
    let shares = equal_shares(assignment);
    let eval = |w: &[f64], c: f64| -> Result<(PowerAllocation, CommonRateSplit, RateReport)> {
        let power = allocation(template, assignment, w, c);
        let zero = CommonRateSplit::zeros(assignment.n_beams, k);
        let base = report_from_gains(gains, &power, &zero, assignment, noise, opts)?;
        let split = fit_common_split(&shares, &base, assignment, opts.decodability);
        let report = report_from_gains(gains, &power, &split, assignment, noise, opts)?;
        Ok((power, split, report))
    };
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let oma_w = optimize_oma(gains, assignment, template, noise, search)?.power;
    let oma_start: Vec<f64> = (0..k).map(|u| oma_w.private_of(assignment, u)).collect();
    for i in 0..search.common_levels {
        let c = i as f64 / search.common_levels as f64;
        for start in [vec![1.0; k], oma_start.clone()] {
            let (w, v) = ascend(k, search, start, |w| eval(w, c).map_or(f64::NEG_INFINITY, |r| r.2.sum_se));
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, w, c));
            }
        }
    }
    let (_, w, c) = best.expect("at least one common level");
    let (power, split, report) = eval(&w, c)?;
    Ok(Allocation { power, split, report })
}

/// Best sum-SE OMA allocation over private weights (no common stream).
pub fn optimize_oma(
    gains: &GainTable,
    assignment: &BeamAssignment,
    template: &PowerAllocation,
    noise: f64,
    search: &SearchConfig,
) -> Result<Allocation> {
    search.validate()?;
    let k = assignment.n_users();
    let eval = |w: &[f64]| oma_from_gains(gains, &allocation(template, assignment, w, 0.0), assignment, noise);
    let (w, _) = ascend(k, search, vec![1.0; k], |w| eval(w).map_or(f64::NEG_INFINITY, |r| r.sum_se));
    let power = allocation(template, assignment, &w, 0.0);
    let report = eval(&w)?;
    Ok(Allocation { power, split: CommonRateSplit::zeros(assignment.n_beams, k), report })
}
