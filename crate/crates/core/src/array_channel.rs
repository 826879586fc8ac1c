//! UAV/user geometry, UPA steering vectors and line-of-sight THz channel draws.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Carrier wavelength at 0.2 THz, in meters.
pub const WAVELENGTH_0_2_THZ: f64 = 1.5e-3;
/// Wavelength value as printed alongside the 0.2 THz carrier (unit unstated).
pub const WAVELENGTH_AS_PRINTED: f64 = 1.36;
/// Half-width of the uniform angular spread applied to every angle of departure.
pub const ANGULAR_SPREAD: f64 = 5.0 * PI / 180.0;

/// Geometry of the lens-antenna-subarray transmitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LasConfig {
    pub n_t: usize,
    pub n_lens: usize,
    pub m_per_lens: usize,
    pub n_rf: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub b_bits: u32,
    pub wavelength: f64,
    pub spacing: f64,
    /// Multiply the CN(0,1) gain by the free-space factor `λ / (4π d)`.
    #[serde(default)]
    pub path_loss: bool,
}

impl LasConfig {
    /// Builds a configuration with half-wavelength spacing.
    pub fn new(
        n_x: usize,
        n_y: usize,
        n_lens: usize,
        n_rf: usize,
        b_bits: u32,
        wavelength: f64,
    ) -> Result<Self> {
        let n_t = n_x * n_y;
        let cfg = LasConfig {
            n_t,
            n_lens,
            m_per_lens: if n_lens == 0 { 0 } else { n_t / n_lens },
            n_rf,
            n_x,
            n_y,
            b_bits,
            wavelength,
            spacing: wavelength / 2.0,
            path_loss: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(Error::config("las.n_x/n_y", "must be positive"));
        }
        if self.n_t != self.n_x * self.n_y {
            return Err(Error::config("las.n_t", "must equal n_x * n_y"));
        }
        if self.n_lens == 0 || self.n_t % self.n_lens != 0 {
            return Err(Error::config("las.n_lens", "must divide n_t"));
        }
        if self.m_per_lens * self.n_lens != self.n_t {
            return Err(Error::config("las.m_per_lens", "must equal n_t / n_lens"));
        }
        if self.n_rf == 0 || self.n_rf > self.n_t {
            return Err(Error::config("las.n_rf", "must lie in 1..=n_t"));
        }
        if self.b_bits == 0 || self.b_bits > 16 {
            return Err(Error::config("las.b_bits", "must lie in 1..=16"));
        }
        if !(self.wavelength.is_finite() && self.wavelength > 0.0) {
            return Err(Error::config("las.wavelength", "must be positive"));
        }
        if (self.spacing - self.wavelength / 2.0).abs() > 1e-12 * self.wavelength {
            return Err(Error::config("las.spacing", "must equal wavelength / 2"));
        }
        Ok(())
    }

    /// Same array with a different lens count. RF chains beyond the lens count
    /// cannot add rank, so `n_rf` is capped at `n_lens`.
    pub fn with_lenses(&self, n_lens: usize) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.n_lens = n_lens;
        cfg.m_per_lens = if n_lens == 0 { 0 } else { self.n_t / n_lens };
        cfg.n_rf = self.n_rf.min(n_lens.max(1));
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for LasConfig {
    fn default() -> Self {
        LasConfig::new(8, 4, 4, 2, 4, WAVELENGTH_0_2_THZ).expect("default geometry is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavPose {
    pub q: [f64; 2],
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundUser {
    pub id: usize,
    pub q: [f64; 2],
}

/// Per-user channel rows plus the parameters that generated them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    /// K x N_t, one row per user.
    pub h: DMatrix<Complex64>,
    pub aod_azimuth: Vec<f64>,
    pub aod_elevation: Vec<f64>,
    pub gain: Vec<Complex64>,
    pub distance: Vec<f64>,
}

impl ChannelRealization {
    pub fn n_users(&self) -> usize {
        self.h.nrows()
    }

    /// Row `k` rebuilt from the stored gain and angles.
    pub fn reconstruct_row(&self, cfg: &LasConfig, k: usize) -> DVector<Complex64> {
        steering_vector(cfg, self.aod_azimuth[k], self.aod_elevation[k]) * self.gain[k]
    }
}

/// UPA steering vector: horizontal factor over `n1 = 0..N_x` Kronecker the
/// vertical factor over `n2 = 0..N_y`, scaled once by `1/sqrt(N_t)`. Element
/// `(n1, n2)` sits at index `n1 * N_y + n2`.
pub fn steering_vector(cfg: &LasConfig, azimuth: f64, elevation: f64) -> DVector<Complex64> {
    let k = 2.0 * PI * cfg.spacing / cfg.wavelength;
    let phase_x = k * azimuth.sin() * elevation.sin();
    let phase_y = k * elevation.cos();
    let scale = 1.0 / (cfg.n_t as f64).sqrt();
    DVector::from_fn(cfg.n_t, |idx, _| {
        let n1 = (idx / cfg.n_y) as f64;
        let n2 = (idx % cfg.n_y) as f64;
        Complex64::from_polar(scale, -(phase_x * n1 + phase_y * n2))
    })
}

/// Azimuth, elevation and slant distance from the UAV to a ground user.
pub fn user_geometry(pose: &UavPose, user: &GroundUser) -> (f64, f64, f64) {
    let dx = pose.q[0] - user.q[0];
    let dy = pose.q[1] - user.q[1];
    let ground = dx.hypot(dy);
    let elevation = (ground / pose.z).atan();
    let azimuth = dy.atan2(dx);
    let distance = (ground * ground + pose.z * pose.z).sqrt();
    (azimuth, elevation, distance)
}

/// Maps an azimuth into [-π/2, π/2] without changing `sin(azimuth)`, which is
/// the only way azimuth enters the steering vector.
pub fn fold_azimuth(azimuth: f64) -> f64 {
    if azimuth > FRAC_PI_2 {
        PI - azimuth
    } else if azimuth < -FRAC_PI_2 {
        -PI - azimuth
    } else {
        azimuth
    }
}

/// The stochastic part of a channel: per-user CN(0,1) gains and angular offsets.
/// Fixed for a seed, so the same draws can be realized at any UAV pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDraws {
    pub gain: Vec<Complex64>,
    pub azimuth_offset: Vec<f64>,
    pub elevation_offset: Vec<f64>,
}

impl ChannelDraws {
    pub fn sample(n_users: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_with(n_users, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(n_users: usize, rng: &mut R) -> Self {
        let spread = Uniform::new_inclusive(-ANGULAR_SPREAD, ANGULAR_SPREAD).expect("finite bounds");
        let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("positive std");
        let mut out = ChannelDraws {
            gain: Vec::with_capacity(n_users),
            azimuth_offset: Vec::with_capacity(n_users),
            elevation_offset: Vec::with_capacity(n_users),
        };
        for _ in 0..n_users {
            out.azimuth_offset.push(spread.sample(rng));
            out.elevation_offset.push(spread.sample(rng));
            let re = normal.sample(rng);
            let im = normal.sample(rng);
            out.gain.push(Complex64::new(re, im));
        }
        out
    }

    /// Channel seen from `pose`.
    pub fn realize(&self, cfg: &LasConfig, pose: &UavPose, users: &[GroundUser]) -> Result<ChannelRealization> {
        if users.is_empty() {
            return Err(Error::config("users", "must be non-empty"));
        }
        if users.len() != self.gain.len() {
            return Err(Error::DimensionMismatch { expected: self.gain.len(), got: users.len() });
        }
        let k_users = users.len();
        let mut h = DMatrix::zeros(k_users, cfg.n_t);
        let mut real = ChannelRealization {
            h: DMatrix::zeros(0, 0),
            aod_azimuth: Vec::with_capacity(k_users),
            aod_elevation: Vec::with_capacity(k_users),
            gain: Vec::with_capacity(k_users),
            distance: Vec::with_capacity(k_users),
        };
        for (k, user) in users.iter().enumerate() {
            let (az, el, dist) = user_geometry(pose, user);
            let az = (fold_azimuth(az) + self.azimuth_offset[k]).clamp(-FRAC_PI_2, FRAC_PI_2);
            let el = (el + self.elevation_offset[k]).clamp(-FRAC_PI_2, FRAC_PI_2);
            let mut gain = self.gain[k];
            if cfg.path_loss {
                gain *= cfg.wavelength / (4.0 * PI * dist);
            }
            let row = steering_vector(cfg, az, el) * gain;
            h.row_mut(k).copy_from(&row.transpose());
            real.aod_azimuth.push(az);
            real.aod_elevation.push(el);
            real.gain.push(gain);
            real.distance.push(dist);
        }
        real.h = h;
        Ok(real)
    }
}

/// Draws a line-of-sight channel for every user. Deterministic in `seed`.
pub fn draw_channel(
    cfg: &LasConfig,
    pose: &UavPose,
    users: &[GroundUser],
    seed: u64,
) -> Result<ChannelRealization> {
    if users.is_empty() {
        return Err(Error::config("users", "must be non-empty"));
    }
    ChannelDraws::sample(users.len(), seed).realize(cfg, pose, users)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_4, SQRT_2};

    fn cfg(n_x: usize, n_y: usize) -> LasConfig {
        LasConfig::new(n_x, n_y, 1, 1, 4, WAVELENGTH_0_2_THZ).unwrap()
    }

    #[test]
    fn single_element_is_one() {
        let a = steering_vector(&cfg(1, 1), 0.7, -0.3);
        assert_eq!(a.len(), 1);
        assert_abs_diff_eq!(a[0].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a[0].im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_phase_direction() {
        let c = cfg(4, 2);
        let a = steering_vector(&c, 0.0, FRAC_PI_2);
        for z in a.iter() {
            assert_abs_diff_eq!(z.re, 1.0 / 8f64.sqrt(), epsilon = 1e-12);
            assert_abs_diff_eq!(z.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_by_two_matches_scalar_oracle() {
        // λ = 2d, so 2π d / λ = π.
        let c = cfg(2, 2);
        let (theta, psi) = (FRAC_PI_4, FRAC_PI_4);
        let a = steering_vector(&c, theta, psi);
        let mut idx = 0;
        for n1 in 0..2 {
            for n2 in 0..2 {
                let px = -PI * theta.sin() * psi.sin() * n1 as f64;
                let py = -PI * psi.cos() * n2 as f64;
                let (re, im) = (0.5 * (px + py).cos(), 0.5 * (px + py).sin());
                assert_abs_diff_eq!(a[idx].re, re, epsilon = 1e-14);
                assert_abs_diff_eq!(a[idx].im, im, epsilon = 1e-14);
                idx += 1;
            }
        }
        // (n1, n2) = (1, 1): phase -π(1/2 + √2/2)
        let expect = -PI * (0.5 + SQRT_2 / 2.0);
        assert_abs_diff_eq!(a[3].arg(), Complex64::from_polar(1.0, expect).arg(), epsilon = 1e-12);
    }

    #[test]
    fn geometry_examples() {
        let pose = UavPose { q: [0.0, 0.0], z: 100.0 };
        let (_, el, d) = user_geometry(&pose, &GroundUser { id: 0, q: [0.0, 0.0] });
        assert_eq!(el, 0.0);
        assert_eq!(d, 100.0);

        let (az, el, d) = user_geometry(&pose, &GroundUser { id: 0, q: [100.0, 0.0] });
        assert_abs_diff_eq!(el, FRAC_PI_4, epsilon = 1e-15);
        assert_abs_diff_eq!(d, 100.0 * SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(az, PI, epsilon = 1e-15);

        let pose = UavPose { q: [0.0, 0.0], z: 50.0 };
        let (az, el, d) = user_geometry(&pose, &GroundUser { id: 0, q: [0.0, -50.0] });
        assert_abs_diff_eq!(el, FRAC_PI_4, epsilon = 1e-15);
        assert_abs_diff_eq!(az, FRAC_PI_2, epsilon = 1e-15);
        assert_abs_diff_eq!(d, 50.0 * SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn fold_preserves_sine() {
        for &az in &[PI, 3.0, 2.0, -2.0, -3.1, 0.4, -PI] {
            let f = fold_azimuth(az);
            assert!((-FRAC_PI_2..=FRAC_PI_2).contains(&f));
            assert_abs_diff_eq!(f.sin(), az.sin(), epsilon = 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LasConfig::new(8, 4, 3, 2, 4, 1.5e-3).is_err());
        assert!(LasConfig::new(8, 4, 4, 2, 0, 1.5e-3).is_err());
        assert!(LasConfig::new(2, 2, 4, 8, 4, 1.5e-3).is_err());
        let mut c = LasConfig::default();
        c.spacing *= 2.0;
        assert!(c.validate().is_err());
        let single = LasConfig::default().with_lenses(1).unwrap();
        assert_eq!((single.n_lens, single.m_per_lens, single.n_rf), (1, 32, 1));
    }

    #[test]
    fn empty_users_rejected() {
        let pose = UavPose { q: [0.0, 0.0], z: 100.0 };
        assert!(draw_channel(&LasConfig::default(), &pose, &[], 1).is_err());
    }
}
