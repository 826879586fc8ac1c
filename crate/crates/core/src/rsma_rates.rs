//! Rate-splitting rates: interference terms, common/private/overall rates,
//! the common-stream decodability margin, power accounting and an OMA baseline.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array_channel::ChannelRealization;
use crate::error::{Error, Result};
use crate::precoding::{BeamAssignment, PrecoderSet};

/// DC power of the transmitter and the hovering power. Placeholder constants,
/// all configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerModel {
    pub p_baseband: f64,
    pub p_rf_chain: f64,
    pub p_phase_shifter: f64,
    pub p_switch: f64,
    pub p_hov: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        PowerModel { p_baseband: 0.2, p_rf_chain: 0.16, p_phase_shifter: 0.04, p_switch: 0.005, p_hov: 10.0 }
    }
}

impl PowerModel {
    /// `P^LAS = P_BB + N_RF (P_RF + P_PS + P_SW)`.
    pub fn p_las(&self, n_rf: usize) -> f64 {
        self.p_baseband + n_rf as f64 * (self.p_rf_chain + self.p_phase_shifter + self.p_switch)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("power.p_baseband", self.p_baseband),
            ("power.p_rf_chain", self.p_rf_chain),
            ("power.p_phase_shifter", self.p_phase_shifter),
            ("power.p_switch", self.p_switch),
            ("power.p_hov", self.p_hov),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    pub p_common: f64,
    /// J x K, zero for unassigned pairs.
    pub p_private: DMatrix<f64>,
    pub p_las: f64,
    pub p_hov: f64,
    pub p_max: f64,
}

impl PowerAllocation {
    pub fn zeros(n_beams: usize, n_users: usize, p_las: f64, p_hov: f64, p_max: f64) -> Self {
        PowerAllocation { p_common: 0.0, p_private: DMatrix::zeros(n_beams, n_users), p_las, p_hov, p_max }
    }

    /// Radiated power, common stream included.
    pub fn transmit_total(&self) -> f64 {
        self.p_common + self.p_private.sum()
    }

    pub fn consumed_total(&self) -> f64 {
        self.p_las + self.p_hov + self.transmit_total()
    }

    /// Power left for transmission once the fixed consumption is paid.
    pub fn transmit_budget(&self) -> f64 {
        self.p_max - self.p_las - self.p_hov
    }

    /// Budget constraint, counting the common stream.
    pub fn satisfies_budget(&self) -> bool {
        self.p_common >= 0.0
            && self.p_private.iter().all(|&p| p >= 0.0)
            && self.consumed_total() <= self.p_max
    }

    /// Private power of user `k` in its assigned beam.
    pub fn private_of(&self, assignment: &BeamAssignment, k: usize) -> f64 {
        self.p_private[(assignment.beam_of_user[k], k)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonRateSplit {
    /// J x K common-rate shares, bps/Hz.
    pub r_star: DMatrix<f64>,
}

impl CommonRateSplit {
    pub fn zeros(n_beams: usize, n_users: usize) -> Self {
        CommonRateSplit { r_star: DMatrix::zeros(n_beams, n_users) }
    }

    /// The same share for every served pair.
    pub fn uniform(assignment: &BeamAssignment, share: f64) -> Self {
        let mut s = Self::zeros(assignment.n_beams, assignment.n_users());
        for (j, k) in assignment.served_pairs() {
            s.r_star[(j, k)] = share;
        }
        s
    }
}

/// Which precoder feeds the numerator of the common rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonGain {
    /// `|h_k W w_c|^2` with the dedicated common precoder.
    #[default]
    CommonPrecoder,
    /// `|h_k W w_k|^2`, the user's private precoder, as printed.
    PrivatePrecoder,
}

/// Gain used for a same-beam interferer `k'` in the private-stream interference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivateInterference {
    /// `|h_k W w_k'|^2 P_k'`.
    #[default]
    CrossGain,
    /// `|h_k W w_k|^2 P_k'`, indexed as printed.
    OwnGain,
}

/// Reduction used by the common-stream decodability constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decodability {
    /// `min_{k in S_j} R^C_{j,k} >= sum_{k in S_j} R*_{j,k}` for every beam.
    #[default]
    PerBeam,
    /// One common stream: `min_k R^C_k >= sum_k R*_k` over all users.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateOptions {
    #[serde(default)]
    pub common_gain: CommonGain,
    #[serde(default)]
    pub private_interference: PrivateInterference,
    #[serde(default)]
    pub decodability: Decodability,
}

/// Received power gains between every user and every precoded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTable {
    /// `cross[(k, k')] = |h_k W^Lens W^RF w_k'|^2`.
    pub cross: DMatrix<f64>,
    /// `common[k] = |h_k W^Lens W^RF w_c|^2`.
    pub common: DVector<f64>,
}

impl GainTable {
    pub fn new(h: &DMatrix<Complex64>, precoders: &PrecoderSet) -> Self {
        let h_eff = precoders.effective_channel(h);
        let cross = (&h_eff * &precoders.w_bb).map(|z| z.norm_sqr());
        let common = (&h_eff * &precoders.w_bb_common).map(|z| z.norm_sqr());
        GainTable { cross, common }
    }

    pub fn n_users(&self) -> usize {
        self.cross.nrows()
    }

    /// Leakage onto user `k` from private streams of other beams.
    pub fn inter_beam(&self, alloc: &PowerAllocation, assignment: &BeamAssignment, k: usize) -> f64 {
        let jk = assignment.beam_of_user[k];
        (0..self.n_users())
            .filter(|&o| assignment.beam_of_user[o] != jk)
            .map(|o| self.cross[(k, o)] * alloc.private_of(assignment, o))
            .sum()
    }

    /// `I_j`: every private stream counts as noise while decoding the common one.
    pub fn common_interference(&self, alloc: &PowerAllocation, assignment: &BeamAssignment, k: usize) -> f64 {
        let j = assignment.beam_of_user[k];
        let intra: f64 = assignment.users_of_beam[j]
            .iter()
            .map(|&o| self.cross[(k, o)] * alloc.p_private[(j, o)])
            .sum();
        intra + self.inter_beam(alloc, assignment, k)
    }

    /// `I'_j`: after SIC, the other private streams remain.
    pub fn private_interference(
        &self,
        alloc: &PowerAllocation,
        assignment: &BeamAssignment,
        k: usize,
        mode: PrivateInterference,
    ) -> f64 {
        let j = assignment.beam_of_user[k];
        let intra: f64 = assignment.users_of_beam[j]
            .iter()
            .filter(|&&o| o != k)
            .map(|&o| {
                let g = match mode {
                    PrivateInterference::CrossGain => self.cross[(k, o)],
                    PrivateInterference::OwnGain => self.cross[(k, k)],
                };
                g * alloc.p_private[(j, o)]
            })
            .sum();
        intra + self.inter_beam(alloc, assignment, k)
    }
}

/// `log2(1 + signal / (interference + noise))`.
pub fn rate_from_sinr(signal: f64, interference: f64, noise: f64) -> f64 {
    (1.0 + signal / (interference + noise)).log2()
}

/// Common-stream rate of user `k` in beam `j`.
pub fn common_rate(
    gains: &GainTable,
    alloc: &PowerAllocation,
    assignment: &BeamAssignment,
    j: usize,
    k: usize,
    noise: f64,
    opts: &RateOptions,
) -> f64 {
    if assignment.beam_of_user[k] != j {
        return 0.0;
    }
    let g = match opts.common_gain {
        CommonGain::CommonPrecoder => gains.common[k],
        CommonGain::PrivatePrecoder => gains.cross[(k, k)],
    };
    rate_from_sinr(g * alloc.p_common, gains.common_interference(alloc, assignment, k), noise)
}

/// Private-stream rate of user `k` in beam `j`, common stream already removed.
pub fn private_rate(
    gains: &GainTable,
    alloc: &PowerAllocation,
    assignment: &BeamAssignment,
    j: usize,
    k: usize,
    noise: f64,
    opts: &RateOptions,
) -> f64 {
    if assignment.beam_of_user[k] != j {
        return 0.0;
    }
    let i = gains.private_interference(alloc, assignment, k, opts.private_interference);
    rate_from_sinr(gains.cross[(k, k)] * alloc.p_private[(j, k)], i, noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// `I'_j` per (j, k).
    pub i_private: DMatrix<f64>,
    /// `I_j` per (j, k).
    pub i_all: DMatrix<f64>,
    /// Inter-beam part of both interference terms per (j, k).
    pub i_inter: DMatrix<f64>,
    /// Received private signal power `|h_k W w_k|^2 P_{j,k}` per (j, k).
    pub signal: DMatrix<f64>,
    pub r_common: DMatrix<f64>,
    pub r_private: DMatrix<f64>,
    pub r_star: DMatrix<f64>,
    pub r_overall: DMatrix<f64>,
    pub sum_se: f64,
    pub ee: f64,
    pub noise_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub beam: usize,
    pub user: usize,
    pub r_common: f64,
    pub r_private: f64,
    pub r_star: f64,
    pub r_overall: f64,
    pub sum_se: f64,
    pub ee: f64,
}

impl RateReport {
    fn empty(n_beams: usize, n_users: usize, noise: f64) -> Self {
        let z = DMatrix::zeros(n_beams, n_users);
        RateReport {
            i_private: z.clone(),
            i_all: z.clone(),
            i_inter: z.clone(),
            signal: z.clone(),
            r_common: z.clone(),
            r_private: z.clone(),
            r_star: z.clone(),
            r_overall: z,
            sum_se: 0.0,
            ee: 0.0,
            noise_power: noise,
        }
    }

    pub fn rows(&self, assignment: &BeamAssignment) -> Vec<RateRow> {
        assignment
            .served_pairs()
            .map(|(j, k)| RateRow {
                beam: j,
                user: k,
                r_common: self.r_common[(j, k)],
                r_private: self.r_private[(j, k)],
                r_star: self.r_star[(j, k)],
                r_overall: self.r_overall[(j, k)],
                sum_se: self.sum_se,
                ee: self.ee,
            })
            .collect()
    }

    /// Minimum common rate under the chosen reduction for beam `j`.
    pub fn min_common_rate(&self, assignment: &BeamAssignment, j: usize, reduction: Decodability) -> f64 {
        match reduction {
            Decodability::PerBeam => assignment.users_of_beam[j]
                .iter()
                .map(|&k| self.r_common[(j, k)])
                .fold(f64::INFINITY, f64::min),
            Decodability::Global => assignment
                .served_pairs()
                .map(|jk| self.r_common[jk])
                .fold(f64::INFINITY, f64::min),
        }
    }
}

fn check_dims(gains: &GainTable, alloc: &PowerAllocation, assignment: &BeamAssignment) -> Result<()> {
    let k = assignment.n_users();
    if gains.n_users() != k {
        return Err(Error::DimensionMismatch { expected: k, got: gains.n_users() });
    }
    if alloc.p_private.shape() != (assignment.n_beams, k) {
        return Err(Error::DimensionMismatch { expected: assignment.n_beams * k, got: alloc.p_private.len() });
    }
    Ok(())
}

/// `min_k R^C - sum_k R*` for beam `j`; non-negative iff decodable.
pub fn decodability_margin(
    report: &RateReport,
    split: &CommonRateSplit,
    assignment: &BeamAssignment,
    j: usize,
    reduction: Decodability,
) -> f64 {
    let shares: f64 = match reduction {
        Decodability::PerBeam => assignment.users_of_beam[j].iter().map(|&k| split.r_star[(j, k)]).sum(),
        Decodability::Global => assignment.served_pairs().map(|jk| split.r_star[jk]).sum(),
    };
    report.min_common_rate(assignment, j, reduction) - shares
}

/// Fills every field of a [`RateReport`] from precomputed gains.
pub fn report_from_gains(
    gains: &GainTable,
    alloc: &PowerAllocation,
    split: &CommonRateSplit,
    assignment: &BeamAssignment,
    noise: f64,
    opts: &RateOptions,
) -> Result<RateReport> {
    check_dims(gains, alloc, assignment)?;
    let mut rep = RateReport::empty(assignment.n_beams, assignment.n_users(), noise);
    for (j, k) in assignment.served_pairs() {
        let inter = gains.inter_beam(alloc, assignment, k);
        rep.i_inter[(j, k)] = inter;
        rep.i_all[(j, k)] = gains.common_interference(alloc, assignment, k);
        rep.i_private[(j, k)] = gains.private_interference(alloc, assignment, k, opts.private_interference);
        rep.signal[(j, k)] = gains.cross[(k, k)] * alloc.p_private[(j, k)];
        rep.r_common[(j, k)] = common_rate(gains, alloc, assignment, j, k, noise, opts);
        rep.r_private[(j, k)] = private_rate(gains, alloc, assignment, j, k, noise, opts);
        rep.r_star[(j, k)] = split.r_star[(j, k)];
        rep.r_overall[(j, k)] = split.r_star[(j, k)] + rep.r_private[(j, k)];
        rep.sum_se += rep.r_overall[(j, k)];
    }
    rep.ee = rep.sum_se / alloc.consumed_total();
    Ok(rep)
}

/// Rate report for one system state.
pub fn system_report(
    channel: &ChannelRealization,
    precoders: &PrecoderSet,
    alloc: &PowerAllocation,
    split: &CommonRateSplit,
    assignment: &BeamAssignment,
    noise: f64,
    opts: &RateOptions,
) -> Result<RateReport> {
    report_from_gains(&GainTable::new(&channel.h, precoders), alloc, split, assignment, noise, opts)
}

/// OMA baseline from precomputed gains: no common stream, users of a beam
/// share it in equal time slots, so only inter-beam leakage interferes.
pub fn oma_from_gains(
    gains: &GainTable,
    alloc: &PowerAllocation,
    assignment: &BeamAssignment,
    noise: f64,
) -> Result<RateReport> {
    check_dims(gains, alloc, assignment)?;
    let mut rep = RateReport::empty(assignment.n_beams, assignment.n_users(), noise);
    for (j, k) in assignment.served_pairs() {
        let share = 1.0 / assignment.users_of_beam[j].len() as f64;
        let inter = gains.inter_beam(alloc, assignment, k);
        rep.i_inter[(j, k)] = inter;
        rep.i_all[(j, k)] = inter;
        rep.i_private[(j, k)] = inter;
        rep.signal[(j, k)] = gains.cross[(k, k)] * alloc.p_private[(j, k)];
        let r = share * rate_from_sinr(rep.signal[(j, k)], inter, noise);
        rep.r_private[(j, k)] = r;
        rep.r_overall[(j, k)] = r;
        rep.sum_se += r;
    }
    rep.ee = rep.sum_se / alloc.consumed_total();
    Ok(rep)
}

pub fn oma_report(
    channel: &ChannelRealization,
    precoders: &PrecoderSet,
    alloc: &PowerAllocation,
    assignment: &BeamAssignment,
    noise: f64,
) -> Result<RateReport> {
    oma_from_gains(&GainTable::new(&channel.h, precoders), alloc, assignment, noise)
}

/// Noise power for an SNR referenced to the per-user share of the transmit
/// budget: `σ² = ((P_max - P_LAS - P_Hov) / K) / 10^(snr/10)`.
pub fn noise_from_snr(snr_db: f64, p_max: f64, p_las: f64, p_hov: f64, k_users: usize) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::config("snr_db", "must be finite"));
    }
    let budget = p_max - p_las - p_hov;
    if !(budget > 0.0) {
        return Err(Error::BudgetInfeasible { p_max, fixed: p_las + p_hov });
    }
    if k_users == 0 {
        return Err(Error::config("k_users", "must be positive"));
    }
    Ok(budget / k_users as f64 / 10f64.powf(snr_db / 10.0))
}
