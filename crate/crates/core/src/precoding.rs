//! Three-stage precoding: lens switch selection, B-bit analog phase shifters and
//! a zero-forcing digital stage, plus greedy user-to-beam clustering.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array_channel::{steering_vector, ChannelRealization, LasConfig};
use crate::error::{Error, Result};

/// Gram matrices with a larger condition number are treated as singular.
pub const DEFAULT_CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamAssignment {
    pub beam_of_user: Vec<usize>,
    /// Users of each beam, ascending.
    pub users_of_beam: Vec<Vec<usize>>,
    pub n_beams: usize,
}

impl BeamAssignment {
    pub fn n_users(&self) -> usize {
        self.beam_of_user.len()
    }

    pub fn max_users_per_beam(&self) -> usize {
        self.users_of_beam.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// (beam, user) pairs ordered by beam, then user.
    pub fn served_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.users_of_beam
            .iter()
            .enumerate()
            .flat_map(|(j, us)| us.iter().map(move |&k| (j, k)))
    }

    /// All users in a single beam.
    pub fn single_beam(n_users: usize) -> Self {
        BeamAssignment {
            beam_of_user: vec![0; n_users],
            users_of_beam: vec![(0..n_users).collect()],
            n_beams: 1,
        }
    }

    /// Every user in a beam of its own.
    pub fn one_per_beam(n_users: usize) -> Self {
        BeamAssignment {
            beam_of_user: (0..n_users).collect(),
            users_of_beam: (0..n_users).map(|k| vec![k]).collect(),
            n_beams: n_users,
        }
    }
}

/// The full precoder chain for one system state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecoderSet {
    /// N_t x N_Lens block-diagonal 0/1 switch matrix.
    pub w_lens: DMatrix<f64>,
    /// Selected element index inside each lens (the position of the 1 in Γ_l).
    pub selected: Vec<usize>,
    /// N_Lens x N_RF analog precoder.
    pub w_rf: DMatrix<Complex64>,
    /// N_RF x K digital precoder, unit-norm columns.
    pub w_bb: DMatrix<Complex64>,
    pub w_bb_common: DVector<Complex64>,
}

impl PrecoderSet {
    /// Γ_l as an explicit M-vector.
    pub fn gamma(&self, lens: usize, m_per_lens: usize) -> DVector<f64> {
        let mut g = DVector::zeros(m_per_lens);
        g[self.selected[lens]] = 1.0;
        g
    }

    /// `W^Lens W^RF`, N_t x N_RF.
    pub fn analog(&self) -> DMatrix<Complex64> {
        self.w_lens.map(|x| Complex64::new(x, 0.0)) * &self.w_rf
    }

    /// Effective channel `H W^Lens W^RF`, K x N_RF.
    pub fn effective_channel(&self, h: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        h * self.analog()
    }
}

/// `n_beams` steering directions on a uniform azimuth grid at 45° elevation.
pub fn uniform_codebook(cfg: &LasConfig, n_beams: usize) -> Vec<DVector<Complex64>> {
    (0..n_beams)
        .map(|j| {
            let az = -FRAC_PI_2 + (j as f64 + 0.5) * PI / n_beams as f64;
            steering_vector(cfg, az, FRAC_PI_4)
        })
        .collect()
}

/// Greedy clustering: every (user, beam) pair is visited by descending
/// response `|h_k b_j^H|`, ties going to the lowest user then lowest beam, and
/// the user joins the beam if it is still unassigned and the beam is under cap.
pub fn cluster_users(
    channel: &ChannelRealization,
    candidate_beams: &[DVector<Complex64>],
    cap: usize,
) -> Result<BeamAssignment> {
    let k_users = channel.n_users();
    let n_beams = candidate_beams.len();
    if cap == 0 {
        return Err(Error::config("cap", "must be at least 1"));
    }
    if n_beams == 0 {
        return Err(Error::config("candidate_beams", "must be non-empty"));
    }
    if k_users > cap * n_beams {
        return Err(Error::CapacityViolation { users: k_users, beams: n_beams, cap });
    }
    let mut pairs = Vec::with_capacity(k_users * n_beams);
    for k in 0..k_users {
        let row = channel.h.row(k);
        for (j, b) in candidate_beams.iter().enumerate() {
            let resp: Complex64 = row.iter().zip(b.iter()).map(|(h, b)| h * b.conj()).sum();
            pairs.push((resp.norm(), k, j));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    let mut beam_of_user = vec![usize::MAX; k_users];
    let mut users_of_beam = vec![Vec::new(); n_beams];
    for (_, k, j) in pairs {
        if beam_of_user[k] == usize::MAX && users_of_beam[j].len() < cap {
            beam_of_user[k] = j;
            users_of_beam[j].push(k);
        }
    }
    debug_assert!(beam_of_user.iter().all(|&j| j != usize::MAX));
    for us in &mut users_of_beam {
        us.sort_unstable();
    }
    Ok(BeamAssignment { beam_of_user, users_of_beam, n_beams })
}

/// One-hot selection per lens: argmax of each score row, lowest index on ties.
pub fn select_lens_beams(scores: &DMatrix<f64>) -> Vec<usize> {
    scores
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v.total_cmp(&row[best]) == Ordering::Greater {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Block-diagonal switch matrix with a single 1 per column.
pub fn lens_matrix(cfg: &LasConfig, selected: &[usize]) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(cfg.n_t, cfg.n_lens);
    for (l, &m) in selected.iter().enumerate() {
        w[(l * cfg.m_per_lens + m, l)] = 1.0;
    }
    w
}

/// Coherent aggregate power of all users at every lens element, N_Lens x M.
pub fn aggregate_lens_scores(cfg: &LasConfig, h: &DMatrix<Complex64>) -> DMatrix<f64> {
    DMatrix::from_fn(cfg.n_lens, cfg.m_per_lens, |l, m| {
        let col = l * cfg.m_per_lens + m;
        h.column(col).iter().sum::<Complex64>().norm_sqr()
    })
}

/// Nearest point of the `2^B`-phase grid, returned in `[0, 2π)`.
pub fn quantize_phase(phase: f64, b_bits: u32) -> f64 {
    let levels = 1u64 << b_bits;
    let step = 2.0 * PI / levels as f64;
    let idx = (phase.rem_euclid(2.0 * PI) / step).round() as u64 % levels;
    2.0 * PI * idx as f64 / levels as f64
}

/// Analog precoder with amplitude `1/sqrt(N_Lens)` and B-bit phases.
pub fn quantize_rf(ideal_phases: &DMatrix<f64>, cfg: &LasConfig) -> DMatrix<Complex64> {
    let amp = 1.0 / (cfg.n_lens as f64).sqrt();
    ideal_phases.map(|p| Complex64::from_polar(amp, quantize_phase(p, cfg.b_bits)))
}

/// Pre-quantization analog phases. Users are ordered by (beam, index) and split
/// into `N_RF` contiguous groups; RF chain `f` conjugate-matches the aggregate
/// channel of group `f` at each lens's selected element. Empty groups get 0.
pub fn ideal_rf_phases(
    cfg: &LasConfig,
    h: &DMatrix<Complex64>,
    selected: &[usize],
    assignment: &BeamAssignment,
) -> DMatrix<f64> {
    let order: Vec<usize> = assignment.served_pairs().map(|(_, k)| k).collect();
    let n = order.len();
    let mut phases = DMatrix::zeros(cfg.n_lens, cfg.n_rf);
    for f in 0..cfg.n_rf {
        let group = &order[f * n / cfg.n_rf..(f + 1) * n / cfg.n_rf];
        for (l, &m) in selected.iter().enumerate() {
            let col = l * cfg.m_per_lens + m;
            let agg: Complex64 = group.iter().map(|&k| h[(k, col)]).sum();
            phases[(l, f)] = if agg.norm() > 0.0 { -agg.arg() } else { 0.0 };
        }
    }
    phases
}

fn condition_number(gram: &DMatrix<Complex64>) -> f64 {
    let sv = gram.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Unnormalized zero-forcing precoder for an effective channel.
///
/// With `K >= N_RF` this is `(H_eff^H H_eff)^-1 H_eff^H`; with `K < N_RF` the
/// N_RF x N_RF Gram is singular by construction and the right inverse
/// `H_eff^H (H_eff H_eff^H)^-1` is used instead.
pub fn zero_forcing_unnormalized(h_eff: &DMatrix<Complex64>, cond_limit: f64) -> Result<DMatrix<Complex64>> {
    let h_adj = h_eff.adjoint();
    let left = h_eff.nrows() >= h_eff.ncols();
    let gram = if left { &h_adj * h_eff } else { h_eff * &h_adj };
    let condition = condition_number(&gram);
    if !(condition < cond_limit) {
        return Err(Error::RankDeficient { condition });
    }
    let inv = gram.try_inverse().ok_or(Error::RankDeficient { condition })?;
    Ok(if left { inv * h_adj } else { h_adj * inv })
}

fn normalize_columns(mut w: DMatrix<Complex64>) -> DMatrix<Complex64> {
    for mut col in w.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= Complex64::new(n, 0.0);
        }
    }
    w
}

/// ZF digital precoder with unit-norm columns.
pub fn zero_forcing(
    h: &DMatrix<Complex64>,
    w_lens: &DMatrix<f64>,
    w_rf: &DMatrix<Complex64>,
    cond_limit: f64,
) -> Result<DMatrix<Complex64>> {
    let h_eff = h * w_lens.map(|x| Complex64::new(x, 0.0)) * w_rf;
    zero_forcing_unnormalized(&h_eff, cond_limit).map(normalize_columns)
}

/// Unit-norm common-stream precoder maximizing the weakest user's gain over the
/// candidates {matched filter to each user, normalized sum of those filters}.
pub fn common_precoder_for(h_eff: &DMatrix<Complex64>) -> Result<DVector<Complex64>> {
    let mut candidates: Vec<DVector<Complex64>> = Vec::with_capacity(h_eff.nrows() + 1);
    for row in h_eff.row_iter() {
        let n = row.norm();
        if n > 0.0 {
            candidates.push(row.adjoint() / Complex64::new(n, 0.0));
        }
    }
    if candidates.is_empty() {
        return Err(Error::RankDeficient { condition: f64::INFINITY });
    }
    let sum: DVector<Complex64> = candidates.iter().fold(DVector::zeros(h_eff.ncols()), |acc, c| acc + c);
    let sn = sum.norm();
    if sn > 0.0 {
        candidates.push(sum / Complex64::new(sn, 0.0));
    }
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, w) in candidates.iter().enumerate() {
        let worst = min_gain(h_eff, w);
        if worst > best_val {
            best_val = worst;
            best = i;
        }
    }
    Ok(candidates.swap_remove(best))
}

/// `min_k |h_eff,k w|^2`.
pub fn min_gain(h_eff: &DMatrix<Complex64>, w: &DVector<Complex64>) -> f64 {
    (h_eff * w).iter().map(|z| z.norm_sqr()).fold(f64::INFINITY, f64::min)
}

pub fn common_precoder(
    h: &DMatrix<Complex64>,
    w_lens: &DMatrix<f64>,
    w_rf: &DMatrix<Complex64>,
) -> Result<DVector<Complex64>> {
    let h_eff = h * w_lens.map(|x| Complex64::new(x, 0.0)) * w_rf;
    common_precoder_for(&h_eff)
}

/// Builds the full chain for a given lens selection.
pub fn build_precoders(
    cfg: &LasConfig,
    channel: &ChannelRealization,
    assignment: &BeamAssignment,
    selected: &[usize],
    cond_limit: f64,
) -> Result<PrecoderSet> {
    if selected.len() != cfg.n_lens {
        return Err(Error::DimensionMismatch { expected: cfg.n_lens, got: selected.len() });
    }
    let w_lens = lens_matrix(cfg, selected);
    let w_rf = quantize_rf(&ideal_rf_phases(cfg, &channel.h, selected, assignment), cfg);
    let w_bb = zero_forcing(&channel.h, &w_lens, &w_rf, cond_limit)?;
    let w_bb_common = common_precoder(&channel.h, &w_lens, &w_rf)?;
    Ok(PrecoderSet { w_lens, selected: selected.to_vec(), w_rf, w_bb, w_bb_common })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array_channel::{draw_channel, GroundUser, UavPose, WAVELENGTH_0_2_THZ};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, cols: usize) -> DMatrix<Complex64> {
        DMatrix::from_fn(r, cols, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn realization(h: DMatrix<Complex64>) -> ChannelRealization {
        let k = h.nrows();
        ChannelRealization {
            h,
            aod_azimuth: vec![0.0; k],
            aod_elevation: vec![0.0; k],
            gain: vec![c(1.0, 0.0); k],
            distance: vec![1.0; k],
        }
    }

    #[test]
    fn cluster_single_user_single_beam() {
        let cfg = LasConfig::default();
        let beams = uniform_codebook(&cfg, 1);
        let ch = realization(DMatrix::from_row_slice(1, 32, &[c(1.0, 0.0); 32]));
        let a = cluster_users(&ch, &beams, 1).unwrap();
        assert_eq!(a.beam_of_user, vec![0]);
        assert_eq!(a.users_of_beam, vec![vec![0]]);
    }

    #[test]
    fn cluster_aligned_channels() {
        let cfg = LasConfig::new(4, 4, 4, 2, 4, WAVELENGTH_0_2_THZ).unwrap();
        // Distinct, near-orthogonal directions: a 4-point grid in sin(az).
        let beams: Vec<_> = [-0.75f64, -0.25, 0.25, 0.75]
            .iter()
            .map(|s| steering_vector(&cfg, s.asin(), FRAC_PI_2 - 0.0))
            .collect();
        // User k carries beam (3 - k) so the mapping is not the identity.
        let mut h = DMatrix::zeros(4, cfg.n_t);
        for k in 0..4 {
            h.row_mut(k).copy_from(&beams[3 - k].transpose());
        }
        let a = cluster_users(&realization(h), &beams, 2).unwrap();
        assert_eq!(a.beam_of_user, vec![3, 2, 1, 0]);
    }

    #[test]
    fn cluster_capacity_violation() {
        let cfg = LasConfig::default();
        let ch = realization(DMatrix::from_element(5, 32, c(1.0, 0.0)));
        let err = cluster_users(&ch, &uniform_codebook(&cfg, 2), 2).unwrap_err();
        assert!(matches!(err, Error::CapacityViolation { users: 5, beams: 2, cap: 2 }));
    }

    #[test]
    fn cluster_respects_cap_and_partitions() {
        let cfg = LasConfig::default();
        let pose = UavPose { q: [0.0, 0.0], z: 100.0 };
        let users: Vec<_> = (0..8)
            .map(|i| GroundUser { id: i, q: [10.0 * i as f64 - 40.0, 5.0 * i as f64] })
            .collect();
        let ch = draw_channel(&cfg, &pose, &users, 3).unwrap();
        let a = cluster_users(&ch, &uniform_codebook(&cfg, 4), 2).unwrap();
        let mut seen = vec![false; 8];
        for us in &a.users_of_beam {
            assert!(us.len() <= 2);
            for &k in us {
                assert!(!seen[k]);
                seen[k] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn lens_selection_examples() {
        let s = DMatrix::from_row_slice(1, 3, &[0.1, 0.9, 0.3]);
        assert_eq!(select_lens_beams(&s), vec![1]);
        let s = DMatrix::from_element(2, 4, 0.5);
        assert_eq!(select_lens_beams(&s), vec![0, 0]);
    }

    #[test]
    fn lens_matrix_index_arithmetic() {
        let cfg = LasConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores = DMatrix::from_fn(4, 8, |_, _| rng.random::<f64>());
        let sel = select_lens_beams(&scores);
        let w = lens_matrix(&cfg, &sel);
        assert_eq!(w.iter().filter(|&&x| x != 0.0).count(), 4);
        for l in 0..4 {
            // Scalar argmax, independent of select_lens_beams.
            let mut arg = 0;
            for m in 1..8 {
                if scores[(l, m)] > scores[(l, arg)] {
                    arg = m;
                }
            }
            assert_eq!(w[(l * 8 + arg, l)], 1.0);
            assert_eq!(w.column(l).sum(), 1.0);
        }
    }

    #[test]
    fn phase_quantization_examples() {
        assert_eq!(quantize_phase(0.0, 4), 0.0);
        let step = 2.0 * PI / 16.0;
        assert_abs_diff_eq!(quantize_phase(1.4 * step, 4), step, epsilon = 1e-15);
        assert_abs_diff_eq!(quantize_phase(1.6 * step, 4), 2.0 * step, epsilon = 1e-15);
        assert_abs_diff_eq!(quantize_phase(-0.1, 4), 0.0, epsilon = 1e-15);
        let cfg = LasConfig::new(8, 4, 4, 2, 1, WAVELENGTH_0_2_THZ).unwrap();
        let phases = DMatrix::from_row_slice(4, 2, &[0.1, 1.0, 2.0, 3.0, -1.0, -2.0, 4.0, 5.9]);
        let w = quantize_rf(&phases, &cfg);
        for z in w.iter() {
            assert_abs_diff_eq!(z.norm(), 0.5, epsilon = 1e-15);
            let p = z.arg().rem_euclid(2.0 * PI);
            assert!(p.abs() < 1e-12 || (p - PI).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_is_idempotent_and_bounded() {
        let cfg = LasConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phases = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-10.0..10.0));
        let w = quantize_rf(&phases, &cfg);
        let again = quantize_rf(&w.map(|z| z.arg()), &cfg);
        assert_eq!(w, again);
        for (p, z) in phases.iter().zip(w.iter()) {
            let d = (p - z.arg()).rem_euclid(2.0 * PI);
            let err = d.min(2.0 * PI - d);
            assert!(err <= PI / 16.0 + 1e-12);
        }
    }

    #[test]
    fn zf_identity_channel() {
        let eye = DMatrix::<Complex64>::identity(2, 2);
        let w = zero_forcing_unnormalized(&eye, DEFAULT_CONDITION_LIMIT).unwrap();
        assert_abs_diff_eq!((w - eye).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zf_square_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let h = random_matrix(&mut rng, 2, 2);
            let w = zero_forcing_unnormalized(&h, DEFAULT_CONDITION_LIMIT).unwrap();
            assert!((&h * w - DMatrix::identity(2, 2)).norm() < 1e-8);
        }
    }

    #[test]
    fn zf_fewer_users_than_chains_uses_right_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 1, 3);
        let w = zero_forcing_unnormalized(&h, DEFAULT_CONDITION_LIMIT).unwrap();
        assert_abs_diff_eq!((&h * w)[(0, 0)].re, 1.0, epsilon = 1e-12);
    }

    /// Orthogonal projector onto the column space built with scalar Gram-Schmidt.
    fn gram_schmidt_projector(a: &DMatrix<Complex64>) -> Vec<Vec<Complex64>> {
        let (rows, cols) = a.shape();
        let mut basis: Vec<Vec<Complex64>> = Vec::new();
        for j in 0..cols {
            let mut v: Vec<Complex64> = (0..rows).map(|i| a[(i, j)]).collect();
            for q in &basis {
                let mut dot = c(0.0, 0.0);
                for i in 0..rows {
                    dot += q[i].conj() * v[i];
                }
                for i in 0..rows {
                    v[i] -= dot * q[i];
                }
            }
            let mut n = 0.0;
            for z in &v {
                n += z.norm_sqr();
            }
            let n = n.sqrt();
            basis.push(v.into_iter().map(|z| z / n).collect());
        }
        let mut p = vec![vec![c(0.0, 0.0); rows]; rows];
        for q in &basis {
            for i in 0..rows {
                for k in 0..rows {
                    p[i][k] += q[i] * q[k].conj();
                }
            }
        }
        p
    }

    #[test]
    fn zf_more_users_than_chains_projects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_matrix(&mut rng, 4, 2);
        let w = zero_forcing_unnormalized(&h, DEFAULT_CONDITION_LIMIT).unwrap();
        let prod = &h * &w;
        let oracle = gram_schmidt_projector(&h);
        for i in 0..4 {
            for k in 0..4 {
                assert_abs_diff_eq!(prod[(i, k)].re, oracle[i][k].re, epsilon = 1e-10);
                assert_abs_diff_eq!(prod[(i, k)].im, oracle[i][k].im, epsilon = 1e-10);
            }
        }
        // Residual off-diagonal leakage is present.
        let off: f64 = (0..4).flat_map(|i| (0..4).map(move |k| (i, k))).filter(|(i, k)| i != k).map(|ik| prod[ik].norm()).sum();
        assert!(off > 1e-3);
    }

    #[test]
    fn zf_rank_deficiency_reported() {
        let h = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)]);
        match zero_forcing_unnormalized(&h, DEFAULT_CONDITION_LIMIT) {
            Err(Error::RankDeficient { condition }) => assert!(condition > DEFAULT_CONDITION_LIMIT),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn zf_scale_invariant_after_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = LasConfig::default();
        let h = random_matrix(&mut rng, 2, 32);
        let w_lens = lens_matrix(&cfg, &[1, 2, 3, 4]);
        let w_rf = quantize_rf(&DMatrix::from_fn(4, 2, |_, _| rng.random_range(0.0..6.0)), &cfg);
        let a = zero_forcing(&h, &w_lens, &w_rf, DEFAULT_CONDITION_LIMIT).unwrap();
        let b = zero_forcing(&(h * c(7.5, 0.0)), &w_lens, &w_rf, DEFAULT_CONDITION_LIMIT).unwrap();
        assert!((a - b).norm() < 1e-10);
    }

    #[test]
    fn common_precoder_single_user_matched_filter() {
        let h = DMatrix::from_row_slice(1, 2, &[c(3.0, 1.0), c(0.0, -2.0)]);
        let w = common_precoder_for(&h).unwrap();
        let mf = h.row(0).adjoint() / c(h.row(0).norm(), 0.0);
        assert!((w - mf).norm() < 1e-14);
    }

    #[test]
    fn common_precoder_identical_users() {
        let h = DMatrix::from_row_slice(2, 2, &[c(1.0, 1.0), c(0.5, 0.0), c(1.0, 1.0), c(0.5, 0.0)]);
        let w = common_precoder_for(&h).unwrap();
        let mf = h.row(0).adjoint() / c(h.row(0).norm(), 0.0);
        assert!((w - mf).norm() < 1e-14);
    }

    #[test]
    fn common_precoder_exhaustive_oracle() {
        let h = DMatrix::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 1.0)]);
        let w = common_precoder_for(&h).unwrap();
        // Candidates by hand: e1, -j e2 (conj of j), and their normalized sum.
        let s = 1.0 / 2f64.sqrt();
        let cands = [
            DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]),
            DVector::from_vec(vec![c(0.0, 0.0), c(0.0, -1.0)]),
            DVector::from_vec(vec![c(s, 0.0), c(0.0, -s)]),
        ];
        let score = |v: &DVector<Complex64>| {
            let g1 = (h[(0, 0)] * v[0] + h[(0, 1)] * v[1]).norm_sqr();
            let g2 = (h[(1, 0)] * v[0] + h[(1, 1)] * v[1]).norm_sqr();
            g1.min(g2)
        };
        let best = cands.iter().max_by(|a, b| score(a).total_cmp(&score(b))).unwrap();
        assert!((w.clone() - best).norm() < 1e-14);
        assert_abs_diff_eq!(score(&w), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn built_chain_structure() {
        let cfg = LasConfig::default();
        let pose = UavPose { q: [0.0, 0.0], z: 100.0 };
        let users = [GroundUser { id: 0, q: [40.0, -20.0] }, GroundUser { id: 1, q: [-60.0, 70.0] }];
        let ch = draw_channel(&cfg, &pose, &users, 9).unwrap();
        let a = cluster_users(&ch, &uniform_codebook(&cfg, 4), 2).unwrap();
        let sel = select_lens_beams(&aggregate_lens_scores(&cfg, &ch.h));
        let p = build_precoders(&cfg, &ch, &a, &sel, DEFAULT_CONDITION_LIMIT).unwrap();
        assert_eq!(p.w_lens.shape(), (32, 4));
        assert_eq!(p.w_rf.shape(), (4, 2));
        assert_eq!(p.w_bb.shape(), (2, 2));
        for l in 0..4 {
            let g = p.gamma(l, 8);
            assert_eq!(g.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(g.sum(), 1.0);
        }
        for col in p.w_bb.column_iter() {
            assert_abs_diff_eq!(col.norm(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p.w_bb_common.norm(), 1.0, epsilon = 1e-12);
    }
}
