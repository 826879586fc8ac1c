//! The downlink as an episodic MDP: action decoding with constraint projection,
//! penalized sum-rate reward, interference-based state and task sampling.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array_channel::{ChannelDraws, ChannelRealization, GroundUser, LasConfig, UavPose};
use crate::error::{Error, Result};
use crate::precoding::{build_precoders, cluster_users, select_lens_beams, uniform_codebook, BeamAssignment, DEFAULT_CONDITION_LIMIT};
use crate::rsma_rates::{
    decodability_margin, noise_from_snr, report_from_gains, CommonRateSplit, Decodability, GainTable, PowerAllocation,
    PowerModel, RateOptions, RateReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateMode {
    /// Interference terms plus the normalized UAV position.
    #[default]
    Augmented,
    /// Interference terms only.
    InterferenceOnly,
}

/// Physical scenario and MDP shaping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub k_users: usize,
    pub n_beams: usize,
    pub beam_cap: usize,
    pub q_min: [f64; 2],
    pub q_max: [f64; 2],
    pub altitude: f64,
    pub v_max: f64,
    pub dt: f64,
    pub p_max: f64,
    /// Minimum overall rate per user, bps/Hz.
    pub r_min: f64,
    /// Fixed common-rate share used by non-learning evaluations, bps/Hz.
    pub r_star: f64,
    pub snr_db: Vec<f64>,
    /// QoS penalty weight μ.
    pub qos_penalty: f64,
    /// Reward assigned when the precoder cannot be built.
    pub penalty_floor: f64,
    pub horizon: usize,
    /// Softmax sharpness applied to power and common-split logits.
    pub logit_gain: f64,
    #[serde(default)]
    pub state_mode: StateMode,
    #[serde(default)]
    pub rate: RateOptions,
    pub cond_limit: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            k_users: 4,
            n_beams: 4,
            beam_cap: 2,
            q_min: [-100.0, -100.0],
            q_max: [100.0, 100.0],
            altitude: 100.0,
            v_max: 20.0,
            dt: 1.0,
            p_max: 50.0,
            r_min: 1.0,
            r_star: 0.1,
            snr_db: vec![5.0],
            qos_penalty: 10.0,
            penalty_floor: -40.0,
            horizon: 20,
            logit_gain: 3.0,
            state_mode: StateMode::Augmented,
            rate: RateOptions::default(),
            cond_limit: DEFAULT_CONDITION_LIMIT,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("scenario.{name}"), "must be positive"))
            }
        };
        if self.k_users == 0 {
            return Err(Error::config("scenario.k_users", "must be positive"));
        }
        if self.n_beams == 0 || self.beam_cap == 0 {
            return Err(Error::config("scenario.n_beams/beam_cap", "must be positive"));
        }
        if self.k_users > self.n_beams * self.beam_cap {
            return Err(Error::config("scenario.k_users", "exceeds n_beams * beam_cap"));
        }
        for i in 0..2 {
            if !(self.q_min[i] < self.q_max[i]) {
                return Err(Error::config("scenario.q_min/q_max", "q_min must be below q_max"));
            }
        }
        pos("altitude", self.altitude)?;
        pos("v_max", self.v_max)?;
        pos("dt", self.dt)?;
        pos("p_max", self.p_max)?;
        pos("logit_gain", self.logit_gain)?;
        pos("cond_limit", self.cond_limit)?;
        if !(self.r_min.is_finite() && self.r_min >= 0.0) {
            return Err(Error::config("scenario.r_min", "must be non-negative"));
        }
        if !(self.r_star.is_finite() && self.r_star >= 0.0) {
            return Err(Error::config("scenario.r_star", "must be non-negative"));
        }
        if !(self.qos_penalty.is_finite() && self.qos_penalty >= 0.0) {
            return Err(Error::config("scenario.qos_penalty", "must be non-negative"));
        }
        if !self.penalty_floor.is_finite() {
            return Err(Error::config("scenario.penalty_floor", "must be finite"));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("scenario.snr_db", "must be a non-empty list of finite values"));
        }
        if self.horizon == 0 {
            return Err(Error::config("scenario.horizon", "must be positive"));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.q_min[0] + self.q_max[0]) / 2.0, (self.q_min[1] + self.q_max[1]) / 2.0]
    }
}

/// One MDP instance of the meta task distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub users: Vec<GroundUser>,
    pub channel_seed: u64,
    pub snr_db: f64,
}

/// I.i.d. tasks: users uniform in the box, distinct channel seeds, SNR drawn
/// from the configured list. Deterministic in `master_seed`.
pub fn sample_tasks(scenario: &ScenarioConfig, n: usize, master_seed: u64) -> Vec<Task> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut seeds = HashSet::with_capacity(n);
    (0..n)
        .map(|id| {
            let users = (0..scenario.k_users)
                .map(|k| GroundUser {
                    id: k,
                    q: [
                        rng.random_range(scenario.q_min[0]..=scenario.q_max[0]),
                        rng.random_range(scenario.q_min[1]..=scenario.q_max[1]),
                    ],
                })
                .collect();
            let channel_seed = loop {
                let s: u64 = rng.random();
                if seeds.insert(s) {
                    break s;
                }
            };
            let snr_db = scenario.snr_db[rng.random_range(0..scenario.snr_db.len())];
            Task { id, users, channel_seed, snr_db }
        })
        .collect()
}

/// Offsets of each field inside a raw action vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionLayout {
    pub n_beams: usize,
    pub slots_per_beam: usize,
    pub n_lens: usize,
    pub m_per_lens: usize,
}

impl ActionLayout {
    pub fn new(scenario: &ScenarioConfig, las: &LasConfig) -> Self {
        ActionLayout { n_beams: scenario.n_beams, slots_per_beam: scenario.beam_cap, n_lens: las.n_lens, m_per_lens: las.m_per_lens }
    }

    fn slots(&self) -> usize {
        self.n_beams * self.slots_per_beam
    }

    /// Private-power logits per (beam, slot) followed by the common logit.
    pub fn power(&self) -> std::ops::Range<usize> {
        0..self.slots() + 1
    }

    pub fn motion(&self) -> std::ops::Range<usize> {
        let s = self.power().end;
        s..s + 2
    }

    pub fn lens(&self) -> std::ops::Range<usize> {
        let s = self.motion().end;
        s..s + self.n_lens * self.m_per_lens
    }

    pub fn split(&self) -> std::ops::Range<usize> {
        let s = self.lens().end;
        s..s + self.slots()
    }

    /// Fraction of the transmit budget actually radiated.
    pub fn total_power(&self) -> usize {
        self.split().end
    }

    pub fn dim(&self) -> usize {
        self.total_power() + 1
    }
}

/// A raw action after projection onto the feasible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedAction {
    pub power: PowerAllocation,
    pub delta_q: [f64; 2],
    pub pose: UavPose,
    pub selected: Vec<usize>,
    pub split: CommonRateSplit,
}

/// Clips a requested displacement to `‖Δq‖ <= v_max·dt`, then clips the new
/// position into the box. The result never moves farther than requested.
pub fn clip_motion(pose: &UavPose, delta: [f64; 2], scenario: &ScenarioConfig) -> ([f64; 2], UavPose) {
    let limit = scenario.v_max * scenario.dt;
    let norm = delta[0].hypot(delta[1]);
    let mut d = if norm > limit { [delta[0] * limit / norm, delta[1] * limit / norm] } else { delta };
    // Rounding in `q + d - q` can overshoot the limit by an ulp; shrink until it holds.
    let place = |d: [f64; 2]| {
        let q = [
            (pose.q[0] + d[0]).clamp(scenario.q_min[0], scenario.q_max[0]),
            (pose.q[1] + d[1]).clamp(scenario.q_min[1], scenario.q_max[1]),
        ];
        ([q[0] - pose.q[0], q[1] - pose.q[1]], UavPose { q, z: pose.z })
    };
    for _ in 0..64 {
        let (moved, p) = place(d);
        if moved[0].hypot(moved[1]) <= limit {
            return (moved, p);
        }
        d = [d[0] * (1.0 - 4.0 * f64::EPSILON), d[1] * (1.0 - 4.0 * f64::EPSILON)];
    }
    // Only reachable from a pose outside the box.
    place([0.0, 0.0])
}

fn softmax(logits: &[f64], gain: f64) -> Vec<f64> {
    let max = logits.iter().map(|&l| gain * l).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (gain * l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Private and common powers from logits and the total-power scalar, scaled so
/// the budget holds exactly.
fn project_power(
    raw: &[f64],
    layout: &ActionLayout,
    assignment: &BeamAssignment,
    scenario: &ScenarioConfig,
    p_las: f64,
    p_hov: f64,
) -> PowerAllocation {
    let logits = &raw[layout.power()];
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    for (j, users) in assignment.users_of_beam.iter().enumerate() {
        for (s, &k) in users.iter().enumerate() {
            idx.push((j, k));
            vals.push(logits[j * layout.slots_per_beam + s]);
        }
    }
    vals.push(logits[layout.slots()]);
    let w = softmax(&vals, scenario.logit_gain);
    let frac = ((raw[layout.total_power()] + 1.0) / 2.0).clamp(0.0, 1.0);
    let mut alloc = PowerAllocation::zeros(assignment.n_beams, assignment.n_users(), p_las, p_hov, scenario.p_max);
    let total = frac * alloc.transmit_budget().max(0.0);
    for (&(j, k), &wi) in idx.iter().zip(&w) {
        alloc.p_private[(j, k)] = wi * total;
    }
    alloc.p_common = w[w.len() - 1] * total;
    while !alloc.satisfies_budget() {
        alloc.p_private *= 1.0 - 1e-12;
        alloc.p_common *= 1.0 - 1e-12;
    }
    alloc
}

/// Shares proportional to softmax weights, scaled to the decodable common rate.
pub fn fit_common_split(
    weights: &DMatrix<f64>,
    report: &RateReport,
    assignment: &BeamAssignment,
    reduction: Decodability,
) -> CommonRateSplit {
    let mut split = CommonRateSplit::zeros(assignment.n_beams, assignment.n_users());
    for j in 0..assignment.n_beams {
        if assignment.users_of_beam[j].is_empty() {
            continue;
        }
        let cap = report.min_common_rate(assignment, j, reduction);
        let norm: f64 = match reduction {
            Decodability::PerBeam => assignment.users_of_beam[j].iter().map(|&k| weights[(j, k)]).sum(),
            Decodability::Global => assignment.served_pairs().map(|jk| weights[jk]).sum(),
        };
        for &k in &assignment.users_of_beam[j] {
            split.r_star[(j, k)] = if norm > 0.0 { weights[(j, k)] / norm * cap } else { 0.0 };
        }
    }
    while (0..assignment.n_beams)
        .any(|j| !assignment.users_of_beam[j].is_empty() && decodability_margin(report, &split, assignment, j, reduction) < 0.0)
    {
        split.r_star *= 1.0 - 1e-12;
    }
    split
}

fn split_weights(raw: &[f64], layout: &ActionLayout, assignment: &BeamAssignment, scenario: &ScenarioConfig) -> DMatrix<f64> {
    let logits = &raw[layout.split()];
    let mut w = DMatrix::zeros(assignment.n_beams, assignment.n_users());
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    for (j, users) in assignment.users_of_beam.iter().enumerate() {
        for (s, &k) in users.iter().enumerate() {
            idx.push((j, k));
            vals.push(logits[j * layout.slots_per_beam + s]);
        }
    }
    for (jk, p) in idx.into_iter().zip(softmax(&vals, scenario.logit_gain)) {
        w[jk] = p;
    }
    w
}

/// Result of one environment transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub penalty: f64,
    pub report: Option<RateReport>,
    pub action: DecodedAction,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub reward: f64,
    pub sum_se: f64,
    pub ee: f64,
    pub x: f64,
    pub y: f64,
    pub penalty: f64,
}

impl StepRecord {
    pub fn from_outcome(step: usize, out: &StepOutcome) -> Self {
        StepRecord {
            step,
            reward: out.reward,
            sum_se: out.report.as_ref().map_or(0.0, |r| r.sum_se),
            ee: out.report.as_ref().map_or(0.0, |r| r.ee),
            x: out.action.pose.q[0],
            y: out.action.pose.q[1],
            penalty: out.penalty,
        }
    }
}

/// Environment bound to one task.
#[derive(Debug, Clone)]
pub struct LasEnv {
    pub scenario: ScenarioConfig,
    pub las: LasConfig,
    pub power: PowerModel,
    pub task: Task,
    pub layout: ActionLayout,
    draws: ChannelDraws,
    assignment: BeamAssignment,
    pose: UavPose,
    noise: f64,
    p_las: f64,
    t: usize,
    state: Vec<f64>,
}

impl LasEnv {
    pub fn new(scenario: ScenarioConfig, las: LasConfig, power: PowerModel, task: Task) -> Result<Self> {
        scenario.validate()?;
        las.validate()?;
        power.validate()?;
        if task.users.len() != scenario.k_users {
            return Err(Error::DimensionMismatch { expected: scenario.k_users, got: task.users.len() });
        }
        let p_las = power.p_las(las.n_rf);
        let noise = noise_from_snr(task.snr_db, scenario.p_max, p_las, power.p_hov, scenario.k_users)?;
        let draws = ChannelDraws::sample(scenario.k_users, task.channel_seed);
        let pose = UavPose { q: scenario.center(), z: scenario.altitude };
        let channel = draws.realize(&las, &pose, &task.users)?;
        let assignment = cluster_users(&channel, &uniform_codebook(&las, scenario.n_beams), scenario.beam_cap)?;
        let layout = ActionLayout::new(&scenario, &las);
        let mut env = LasEnv { scenario, las, power, task, layout, draws, assignment, pose, noise, p_las, t: 0, state: Vec::new() };
        env.reset()?;
        Ok(env)
    }

    pub fn action_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn state_dim(&self) -> usize {
        let base = 2 * self.scenario.k_users;
        match self.scenario.state_mode {
            StateMode::Augmented => base + 2,
            StateMode::InterferenceOnly => base,
        }
    }

    pub fn assignment(&self) -> &BeamAssignment {
        &self.assignment
    }

    pub fn pose(&self) -> UavPose {
        self.pose
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn p_las(&self) -> f64 {
        self.p_las
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn channel_at(&self, pose: &UavPose) -> Result<ChannelRealization> {
        self.draws.realize(&self.las, pose, &self.task.users)
    }

    /// UAV back to the box center; state from the equal-power default action.
    pub fn reset(&mut self) -> Result<Vec<f64>> {
        self.pose = UavPose { q: self.scenario.center(), z: self.scenario.altitude };
        self.t = 0;
        let neutral = vec![0.0; self.action_dim()];
        let (action, report) = self.decode(&neutral)?;
        self.state = self.encode_state(report.as_ref(), &action.pose);
        Ok(self.state.clone())
    }

    /// Projects a raw action without advancing the episode.
    pub fn project_action(&self, raw: &[f64]) -> Result<DecodedAction> {
        self.decode(raw).map(|(a, _)| a)
    }

    /// Decodes a raw action; the report is `None` when the precoder is rank deficient.
    fn decode(&self, raw: &[f64]) -> Result<(DecodedAction, Option<RateReport>)> {
        if raw.len() != self.action_dim() {
            return Err(Error::DimensionMismatch { expected: self.action_dim(), got: raw.len() });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("action", "raw action must be finite"));
        }
        let l = &self.layout;
        let power = project_power(raw, l, &self.assignment, &self.scenario, self.p_las, self.power.p_hov);
        let m = &raw[l.motion()];
        let step = self.scenario.v_max * self.scenario.dt;
        let (delta_q, pose) = clip_motion(&self.pose, [m[0] * step, m[1] * step], &self.scenario);
        let scores = DMatrix::from_row_slice(l.n_lens, l.m_per_lens, &raw[l.lens()]);
        let selected = select_lens_beams(&scores);
        let weights = split_weights(raw, l, &self.assignment, &self.scenario);

        let channel = self.draws.realize(&self.las, &pose, &self.task.users)?;
        let zero_split = CommonRateSplit::zeros(self.assignment.n_beams, self.assignment.n_users());
        let precoders = match build_precoders(&self.las, &channel, &self.assignment, &selected, self.scenario.cond_limit) {
            Ok(p) => p,
            Err(Error::RankDeficient { condition }) => {
                log::debug!("task {}: rank-deficient precoder (cond {condition:.3e})", self.task.id);
                return Ok((DecodedAction { power, delta_q, pose, selected, split: zero_split }, None));
            }
            Err(e) => return Err(e),
        };
        let gains = GainTable::new(&channel.h, &precoders);
        let rates = report_from_gains(&gains, &power, &zero_split, &self.assignment, self.noise, &self.scenario.rate)?;
        let split = fit_common_split(&weights, &rates, &self.assignment, self.scenario.rate.decodability);
        let report = report_from_gains(&gains, &power, &split, &self.assignment, self.noise, &self.scenario.rate)?;
        Ok((DecodedAction { power, delta_q, pose, selected, split }, Some(report)))
    }

    fn encode_state(&self, report: Option<&RateReport>, pose: &UavPose) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.state_dim());
        for (j, k) in self.assignment.served_pairs() {
            let (i_all, i_priv) = report.map_or((0.0, 0.0), |r| (r.i_all[(j, k)], r.i_private[(j, k)]));
            s.push((1.0 + i_all / self.noise).log10());
            s.push((1.0 + i_priv / self.noise).log10());
        }
        if self.scenario.state_mode == StateMode::Augmented {
            let c = self.scenario.center();
            for i in 0..2 {
                let half = (self.scenario.q_max[i] - self.scenario.q_min[i]) / 2.0;
                s.push((pose.q[i] - c[i]) / half);
            }
        }
        s
    }

    /// A raw action whose projection reproduces `action` (up to rounding):
    /// log-power and log-share logits, normalized motion, one-hot lens scores.
    pub fn encode_action(&self, action: &DecodedAction) -> Vec<f64> {
        let l = &self.layout;
        let g = self.scenario.logit_gain;
        let logit = |v: f64| if v > 0.0 { v.ln() / g } else { -1e6 };
        let mut raw = vec![0.0; l.dim()];
        for (j, users) in self.assignment.users_of_beam.iter().enumerate() {
            for (s, &k) in users.iter().enumerate() {
                raw[l.power().start + j * l.slots_per_beam + s] = logit(action.power.p_private[(j, k)]);
                raw[l.split().start + j * l.slots_per_beam + s] = logit(action.split.r_star[(j, k)]);
            }
        }
        raw[l.power().start + l.slots()] = logit(action.power.p_common);
        let budget = action.power.transmit_budget().max(0.0);
        let frac = if budget > 0.0 { (action.power.transmit_total() / budget).min(1.0) } else { 0.0 };
        raw[l.total_power()] = 2.0 * frac - 1.0;
        let step = self.scenario.v_max * self.scenario.dt;
        let m = l.motion().start;
        raw[m] = action.delta_q[0] / step;
        raw[m + 1] = action.delta_q[1] / step;
        for (lens, &b) in action.selected.iter().enumerate() {
            raw[l.lens().start + lens * l.m_per_lens + b] = 1.0;
        }
        raw
    }

    /// QoS shortfall penalty `μ Σ max(0, R_min - R̃_{j,k})`.
    pub fn qos_penalty(&self, report: &RateReport) -> f64 {
        self.scenario.qos_penalty
            * self
                .assignment
                .served_pairs()
                .map(|jk| (self.scenario.r_min - report.r_overall[jk]).max(0.0))
                .sum::<f64>()
    }

    pub fn step(&mut self, raw: &[f64]) -> Result<StepOutcome> {
        let (action, report) = self.decode(raw)?;
        let (reward, penalty) = match &report {
            Some(r) => {
                let p = self.qos_penalty(r);
                (r.sum_se - p, p)
            }
            None => (self.scenario.penalty_floor, 0.0),
        };
        self.pose = action.pose;
        self.t += 1;
        self.state = self.encode_state(report.as_ref(), &self.pose);
        Ok(StepOutcome {
            next_state: self.state.clone(),
            reward,
            penalty,
            report,
            action,
            done: self.t >= self.scenario.horizon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn env() -> LasEnv {
        let sc = ScenarioConfig::default();
        let task = sample_tasks(&sc, 1, 42).remove(0);
        LasEnv::new(sc, LasConfig::default(), PowerModel::default(), task).unwrap()
    }

    #[test]
    fn layout_dimensions() {
        let e = env();
        // (4*2 + 1) + 2 + 32 + 8 + 1
        assert_eq!(e.action_dim(), 52);
        assert_eq!(e.state_dim(), 10);
        assert_eq!(e.state().len(), 10);
    }

    #[test]
    fn reset_is_deterministic_and_centered() {
        let mut a = env();
        let mut b = env();
        assert_eq!(a.reset().unwrap(), b.reset().unwrap());
        assert_eq!(a.pose().q, [0.0, 0.0]);
        let s = a.state();
        assert_eq!(&s[8..], &[0.0, 0.0]);
    }

    #[test]
    fn neutral_action_projection() {
        let e = env();
        let d = e.project_action(&vec![0.0; e.action_dim()]).unwrap();
        let budget = d.power.transmit_budget();
        let expect = 0.5 * budget / 5.0;
        for (j, k) in e.assignment().served_pairs() {
            assert_abs_diff_eq!(d.power.p_private[(j, k)], expect, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(d.power.p_common, expect, epsilon = 1e-9);
        assert_eq!(d.delta_q, [0.0, 0.0]);
        assert_eq!(d.selected, vec![0; 4]);
        for j in 0..4 {
            let us = &e.assignment().users_of_beam[j];
            if us.len() == 2 {
                assert_abs_diff_eq!(d.split.r_star[(j, us[0])], d.split.r_star[(j, us[1])], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn motion_clipping() {
        let sc = ScenarioConfig::default();
        let pose = UavPose { q: [0.0, 0.0], z: 100.0 };
        let (d, p) = clip_motion(&pose, [30.0, 0.0], &sc);
        assert_abs_diff_eq!(d[0], 20.0, epsilon = 1e-12);
        assert_eq!(d[1], 0.0);
        assert!(d[0] <= 20.0);
        assert_eq!(p.q[1], 0.0);

        let pose = UavPose { q: [95.0, 0.0], z: 100.0 };
        let (_, p) = clip_motion(&pose, [20.0, 0.0], &sc);
        assert_eq!(p.q, [100.0, 0.0]);
    }

    #[test]
    fn rejects_bad_actions() {
        let e = env();
        assert!(e.project_action(&[0.0; 3]).is_err());
        let mut raw = vec![0.0; e.action_dim()];
        raw[0] = f64::NAN;
        assert!(e.project_action(&raw).is_err());
    }

    #[test]
    fn reward_without_penalty_equals_sum_se() {
        let mut sc = ScenarioConfig::default();
        sc.qos_penalty = 0.0;
        let task = sample_tasks(&sc, 1, 5).remove(0);
        let mut e = LasEnv::new(sc, LasConfig::default(), PowerModel::default(), task).unwrap();
        let out = e.step(&vec![0.3; e.action_dim()]).unwrap();
        assert_eq!(out.reward, out.report.unwrap().sum_se);
    }

    #[test]
    fn reward_with_satisfied_qos() {
        let mut sc = ScenarioConfig::default();
        sc.r_min = 0.0;
        let task = sample_tasks(&sc, 1, 5).remove(0);
        let mut e = LasEnv::new(sc, LasConfig::default(), PowerModel::default(), task).unwrap();
        let out = e.step(&vec![-0.2; e.action_dim()]).unwrap();
        assert_eq!(out.penalty, 0.0);
        assert_eq!(out.reward, out.report.unwrap().sum_se);
    }

    #[test]
    fn penalty_hand_computed() {
        let e = env();
        let a = e.assignment().clone();
        let mut rep = RateReport {
            i_private: DMatrix::zeros(4, 4),
            i_all: DMatrix::zeros(4, 4),
            i_inter: DMatrix::zeros(4, 4),
            signal: DMatrix::zeros(4, 4),
            r_common: DMatrix::zeros(4, 4),
            r_private: DMatrix::zeros(4, 4),
            r_star: DMatrix::zeros(4, 4),
            r_overall: DMatrix::zeros(4, 4),
            sum_se: 0.0,
            ee: 0.0,
            noise_power: 1.0,
        };
        let pairs: Vec<_> = a.served_pairs().collect();
        for &jk in &pairs {
            rep.r_overall[jk] = 2.0;
        }
        rep.r_overall[pairs[0]] = 0.5;
        assert_abs_diff_eq!(e.qos_penalty(&rep), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn step_replays_bit_for_bit() {
        let mut a = env();
        let mut b = env();
        let raw: Vec<f64> = (0..a.action_dim()).map(|i| ((i * 37 % 11) as f64 / 5.0) - 1.0).collect();
        for _ in 0..5 {
            let x = a.step(&raw).unwrap();
            let y = b.step(&raw).unwrap();
            assert_eq!(x.reward.to_bits(), y.reward.to_bits());
            assert_eq!(x.next_state, y.next_state);
        }
    }

    #[test]
    fn episode_ends_at_horizon() {
        let mut e = env();
        let raw = vec![0.0; e.action_dim()];
        for t in 1..=20 {
            let out = e.step(&raw).unwrap();
            assert_eq!(out.done, t == 20);
        }
    }

    #[test]
    fn sampled_tasks() {
        let sc = ScenarioConfig::default();
        let a = sample_tasks(&sc, 1000, 1);
        let seeds: HashSet<u64> = a.iter().map(|t| t.channel_seed).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(a, sample_tasks(&sc, 1000, 1));
        for t in &a {
            for u in &t.users {
                assert!(u.q[0].abs() <= 100.0 && u.q[1].abs() <= 100.0);
            }
        }
    }

    #[test]
    fn channel_seed_changes_channel() {
        let sc = ScenarioConfig::default();
        let mut t1 = sample_tasks(&sc, 1, 3).remove(0);
        let mut t2 = t1.clone();
        t2.channel_seed ^= 1;
        let pose = UavPose { q: [0.0, 0.0], z: 100.0 };
        let las = LasConfig::default();
        let c1 = crate::array_channel::draw_channel(&las, &pose, &t1.users, t1.channel_seed).unwrap();
        let c2 = crate::array_channel::draw_channel(&las, &pose, &t2.users, t2.channel_seed).unwrap();
        assert_ne!(c1, c2);
        t1.id = 9;
        assert_eq!(t1.users, t2.users);
    }

    #[test]
    fn interference_only_state() {
        let mut sc = ScenarioConfig::default();
        sc.state_mode = StateMode::InterferenceOnly;
        let task = sample_tasks(&sc, 1, 5).remove(0);
        let e = LasEnv::new(sc, LasConfig::default(), PowerModel::default(), task).unwrap();
        assert_eq!(e.state_dim(), 8);
        assert_eq!(e.state().len(), 8);
    }

    #[test]
    fn encoded_action_projects_back() {
        let mut e = env();
        let raw: Vec<f64> = (0..e.action_dim()).map(|i| ((i * 53 % 17) as f64 / 8.0) - 1.0).collect();
        e.step(&raw).unwrap();
        let a = e.project_action(&raw).unwrap();
        let b = e.project_action(&e.encode_action(&a)).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_abs_diff_eq!(a.power.p_common, b.power.p_common, epsilon = 1e-9);
        assert!((&a.power.p_private - &b.power.p_private).amax() < 1e-9);
        assert!((&a.split.r_star - &b.split.r_star).amax() < 1e-9);
        assert_abs_diff_eq!(a.delta_q[0], b.delta_q[0], epsilon = 1e-9);
        assert_abs_diff_eq!(a.delta_q[1], b.delta_q[1], epsilon = 1e-9);
    }
}
