//! Deep deterministic policy gradient: replay memory, critic regression to
//! the bootstrapped target, deterministic policy-gradient actor updates and
//! Gaussian exploration.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp_env::LasEnv;
use crate::nn::{soft_update, Activation, Adam, Checkpoint, GradientSet, MlpParams, Optimizer};

/// `[s(t), a(t), s(t+1), r(t)]`, with `a` the raw (pre-projection) action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
}

/// Bounded FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), storage: VecDeque::with_capacity(capacity.min(4096)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.storage.get(i)
    }

    /// Uniform mini-batch, without replacement inside the batch.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if self.storage.is_empty() || n == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = n.min(self.storage.len());
        let picked: Vec<&Transition> = index::sample(rng, self.storage.len(), n).iter().map(|i| &self.storage[i]).collect();
        Batch::from_transitions(picked)
    }

    /// Two disjoint uniform samples (support, query).
    pub fn sample_disjoint<R: Rng + ?Sized>(&self, a: usize, b: usize, rng: &mut R) -> Result<(Batch, Batch)> {
        let len = self.storage.len();
        if len < 2 || a == 0 || b == 0 {
            return Err(Error::EmptyBatch);
        }
        let (a, b) = if a + b <= len { (a, b) } else { (len * a / (a + b), len - len * a / (a + b)) };
        let (a, b) = (a.max(1), b.max(1).min(len - a.max(1)));
        let idx = index::sample(rng, len, a + b).into_vec();
        let first = Batch::from_transitions(idx[..a].iter().map(|&i| &self.storage[i]))?;
        let second = Batch::from_transitions(idx[a..].iter().map(|&i| &self.storage[i]))?;
        Ok((first, second))
    }
}

/// Column-stacked mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub next_states: DMatrix<f64>,
    pub rewards: Vec<f64>,
}

impl Batch {
    pub fn from_transitions<'a>(ts: impl IntoIterator<Item = &'a Transition>) -> Result<Self> {
        let ts: Vec<&Transition> = ts.into_iter().collect();
        let first = ts.first().ok_or(Error::EmptyBatch)?;
        let (sd, ad) = (first.state.len(), first.action.len());
        for t in &ts {
            if t.state.len() != sd || t.next_state.len() != sd {
                return Err(Error::DimensionMismatch { expected: sd, got: t.state.len().max(t.next_state.len()) });
            }
            if t.action.len() != ad {
                return Err(Error::DimensionMismatch { expected: ad, got: t.action.len() });
            }
        }
        let n = ts.len();
        Ok(Batch {
            states: DMatrix::from_fn(sd, n, |r, c| ts[c].state[r]),
            actions: DMatrix::from_fn(ad, n, |r, c| ts[c].action[r]),
            next_states: DMatrix::from_fn(sd, n, |r, c| ts[c].next_state[r]),
            rewards: ts.iter().map(|t| t.reward).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn build(self, params: &MlpParams) -> Optimizer {
        match self {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub discount: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub soft_update_rho: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup_steps: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    /// Environment steps over which the exploration scale decays linearly.
    pub noise_decay_steps: usize,
    pub grad_clip: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Multiplier applied to rewards before they enter the replay memory.
    #[serde(default = "unit")]
    pub reward_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            discount: 0.9,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            soft_update_rho: 0.005,
            batch_size: 64,
            buffer_capacity: 100_000,
            warmup_steps: 500,
            noise_start: 0.2,
            noise_end: 0.01,
            noise_decay_steps: 20_000,
            grad_clip: 1.0,
            hidden_width: 256,
            hidden_layers: 4,
            optimizer: OptimizerKind::Adam,
            reward_scale: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::config("agent.discount", "must lie in [0, 1)"));
        }
        for (name, v) in [("agent.lr_actor", self.lr_actor), ("agent.lr_critic", self.lr_critic)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if !(self.soft_update_rho > 0.0 && self.soft_update_rho <= 1.0) {
            return Err(Error::config("agent.soft_update_rho", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return Err(Error::config("agent.batch_size", "must be positive and at most buffer_capacity"));
        }
        if !(self.noise_start >= 0.0 && self.noise_end >= 0.0 && self.noise_start.is_finite() && self.noise_end.is_finite()) {
            return Err(Error::config("agent.noise_start/noise_end", "must be non-negative"));
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return Err(Error::config("agent.reward_scale", "must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("agent.grad_clip", "must be positive"));
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::config("agent.hidden_width/hidden_layers", "must be positive"));
        }
        Ok(())
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        s.push(output);
        s
    }

    /// Randomly initialized actor (tanh output) and critic (identity output).
    pub fn init_networks<R: Rng + ?Sized>(&self, state_dim: usize, action_dim: usize, rng: &mut R) -> (MlpParams, MlpParams) {
        let actor = MlpParams::new(&self.sizes(state_dim, action_dim), Activation::Relu, Activation::Tanh, rng);
        let critic = MlpParams::new(&self.sizes(state_dim + action_dim, 1), Activation::Relu, Activation::Identity, rng);
        (actor, critic)
    }
}

/// Deterministic policy output plus clipped Gaussian noise.
pub fn act<R: Rng + ?Sized>(actor: &MlpParams, state: &[f64], noise_scale: f64, rng: &mut R) -> Result<Vec<f64>> {
    let mut a = actor.forward(state)?;
    if noise_scale > 0.0 {
        let n = Normal::new(0.0, noise_scale).map_err(|e| Error::config("noise_scale", e.to_string()))?;
        for v in &mut a {
            *v += n.sample(rng);
        }
    }
    for v in &mut a {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(a)
}

/// `χ = r + γ Q'(s', μ'(s'))` for a single transition.
pub fn critic_target(reward: f64, next_state: &[f64], target_actor: &MlpParams, target_critic: &MlpParams, discount: f64) -> Result<f64> {
    if discount == 0.0 {
        return Ok(reward);
    }
    let a = target_actor.forward(next_state)?;
    let mut x = next_state.to_vec();
    x.extend(a);
    Ok(reward + discount * target_critic.forward(&x)?[0])
}

fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    m.rows_mut(0, a.nrows()).copy_from(a);
    m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    m
}

/// Bootstrapped targets for a whole batch.
pub fn batch_targets(batch: &Batch, target_actor: &MlpParams, target_critic: &MlpParams, discount: f64) -> Result<Vec<f64>> {
    if discount == 0.0 {
        return Ok(batch.rewards.clone());
    }
    let a = target_actor.forward_batch(&batch.next_states)?;
    let q = target_critic.forward_batch(&stack(&batch.next_states, &a))?;
    Ok(batch.rewards.iter().zip(q.iter()).map(|(r, q)| r + discount * q).collect())
}

/// Mean squared error to `targets` and its gradient with respect to the critic.
pub fn critic_loss_grad(critic: &MlpParams, batch: &Batch, targets: &[f64]) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let cache = critic.forward_cache(&stack(&batch.states, &batch.actions))?;
    let q = cache.output();
    let resid = DMatrix::from_fn(1, batch.len(), |_, c| q[(0, c)] - targets[c]);
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let (g, _) = critic.backward(&cache, &(resid * (2.0 / n)))?;
    Ok((loss, g))
}

/// Mean `Q(s, μ(s))` and the gradient of its negation with respect to the actor.
pub fn actor_objective_grad(actor: &MlpParams, critic: &MlpParams, states: &DMatrix<f64>) -> Result<(f64, GradientSet)> {
    if states.ncols() == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = states.ncols() as f64;
    let a_cache = actor.forward_cache(states)?;
    let q_cache = critic.forward_cache(&stack(states, a_cache.output()))?;
    let objective = q_cache.output().iter().sum::<f64>() / n;
    let upstream = DMatrix::from_element(1, states.ncols(), -1.0 / n);
    let (_, dx) = critic.backward(&q_cache, &upstream)?;
    let da = dx.rows(states.nrows(), actor.output_dim()).into_owned();
    let (g, _) = actor.backward(&a_cache, &da)?;
    Ok((objective, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub critic_grad_norm: f64,
    pub actor_grad_norm: f64,
}

/// Actor, critic, their targets, optimizers and replay memory.
#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub cfg: AgentConfig,
    pub actor: MlpParams,
    pub critic: MlpParams,
    pub actor_target: MlpParams,
    pub critic_target: MlpParams,
    pub buffer: ReplayBuffer,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    rng: ChaCha8Rng,
    env_steps: usize,
    updates: usize,
}

impl DdpgAgent {
    pub fn new(cfg: AgentConfig, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (actor, critic) = cfg.init_networks(state_dim, action_dim, &mut rng);
        Self::assemble(cfg, actor, critic, rng)
    }

    /// Agent starting from given parameters (e.g. a meta-learned initialization).
    pub fn from_params(cfg: AgentConfig, actor: MlpParams, critic: MlpParams, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if critic.input_dim() != actor.input_dim() + actor.output_dim() || critic.output_dim() != 1 {
            return Err(Error::DimensionMismatch { expected: actor.input_dim() + actor.output_dim(), got: critic.input_dim() });
        }
        Self::assemble(cfg, actor, critic, ChaCha8Rng::seed_from_u64(seed))
    }

    fn assemble(cfg: AgentConfig, actor: MlpParams, critic: MlpParams, rng: ChaCha8Rng) -> Result<Self> {
        Ok(DdpgAgent {
            actor_opt: cfg.optimizer.build(&actor),
            critic_opt: cfg.optimizer.build(&critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            actor,
            critic,
            cfg,
            rng,
            env_steps: 0,
            updates: 0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Current exploration scale, decaying linearly with environment steps.
    pub fn noise_scale(&self) -> f64 {
        let c = &self.cfg;
        let frac = if c.noise_decay_steps == 0 { 1.0 } else { (self.env_steps as f64 / c.noise_decay_steps as f64).min(1.0) };
        c.noise_start + (c.noise_end - c.noise_start) * frac
    }

    /// Exploratory action: uniform during warmup, then policy plus noise.
    pub fn explore(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        if self.env_steps < self.cfg.warmup_steps {
            let d = self.action_dim();
            return Ok((0..d).map(|_| self.rng.random_range(-1.0..=1.0)).collect());
        }
        let s = self.noise_scale();
        act(&self.actor, state, s, &mut self.rng)
    }

    /// Noise-free policy output.
    pub fn greedy(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(state)
    }

    pub fn observe(&mut self, t: Transition) {
        self.buffer.push(t);
        self.env_steps += 1;
    }

    pub fn ready(&self) -> bool {
        self.buffer.len() >= self.cfg.warmup_steps.max(self.cfg.batch_size)
    }

    /// One update from a uniformly sampled mini-batch.
    pub fn train(&mut self) -> Result<TrainDiagnostics> {
        let batch = self.buffer.sample(self.cfg.batch_size, &mut self.rng)?;
        self.train_step(&batch)
    }

    /// Critic step on the MSE to `χ`, actor step along `∇_a Q`, soft target updates.
    pub fn train_step(&mut self, batch: &Batch) -> Result<TrainDiagnostics> {
        let targets = batch_targets(batch, &self.actor_target, &self.critic_target, self.cfg.discount)?;
        let (critic_loss, mut gc) = critic_loss_grad(&self.critic, batch, &targets)?;
        let critic_grad_norm = gc.norm();
        if !critic_loss.is_finite() || !critic_grad_norm.is_finite() {
            return Err(Error::NonFinite("critic loss".into()));
        }
        gc.clip_norm(self.cfg.grad_clip);
        self.critic_opt.step(&mut self.critic, &gc, self.cfg.lr_critic);

        let (actor_objective, mut ga) = actor_objective_grad(&self.actor, &self.critic, &batch.states)?;
        let actor_grad_norm = ga.norm();
        if !actor_objective.is_finite() || !actor_grad_norm.is_finite() {
            return Err(Error::NonFinite("actor objective".into()));
        }
        ga.clip_norm(self.cfg.grad_clip);
        self.actor_opt.step(&mut self.actor, &ga, self.cfg.lr_actor);

        soft_update(&mut self.critic_target, &self.critic, self.cfg.soft_update_rho)?;
        soft_update(&mut self.actor_target, &self.actor, self.cfg.soft_update_rho)?;
        self.updates += 1;
        Ok(TrainDiagnostics { critic_loss, actor_objective, critic_grad_norm, actor_grad_norm })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("actor", &self.actor);
        c.insert("critic", &self.critic);
        c.insert("actor_target", &self.actor_target);
        c.insert("critic_target", &self.critic_target);
        c
    }

    pub fn load_checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        let actor = c.get("actor")?;
        let critic = c.get("critic")?;
        if !actor.same_shape(&self.actor) || !critic.same_shape(&self.critic) {
            return Err(Error::DimensionMismatch { expected: self.actor.n_params(), got: actor.n_params() });
        }
        self.actor_target = c.get("actor_target").unwrap_or_else(|_| actor.clone());
        self.critic_target = c.get("critic_target").unwrap_or_else(|_| critic.clone());
        self.actor_opt = self.cfg.optimizer.build(&actor);
        self.critic_opt = self.cfg.optimizer.build(&critic);
        self.actor = actor;
        self.critic = critic;
        Ok(())
    }
}

/// Result of one environment transition, as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment with continuous actions in `[-1, 1]^d`.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<f64>>;
    fn step(&mut self, action: &[f64]) -> Result<EnvStep>;
}

impl Environment for LasEnv {
    fn state_dim(&self) -> usize {
        LasEnv::state_dim(self)
    }

    fn action_dim(&self) -> usize {
        LasEnv::action_dim(self)
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        LasEnv::reset(self)
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        let out = LasEnv::step(self, action)?;
        Ok(EnvStep { next_state: out.next_state, reward: out.reward, done: out.done })
    }
}

/// Single-state bandit with reward `-(a_0 - optimum)^2`; episodes last `horizon` steps.
#[derive(Debug, Clone)]
pub struct QuadraticBandit {
    pub optimum: f64,
    pub horizon: usize,
    t: usize,
}

impl QuadraticBandit {
    pub fn new(optimum: f64, horizon: usize) -> Self {
        QuadraticBandit { optimum, horizon: horizon.max(1), t: 0 }
    }
}

impl Environment for QuadraticBandit {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.t = 0;
        Ok(vec![1.0])
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        if action.len() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: action.len() });
        }
        self.t += 1;
        let d = action[0] - self.optimum;
        Ok(EnvStep { next_state: vec![1.0], reward: -d * d, done: self.t >= self.horizon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub step: usize,
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub noise_scale: f64,
}

pub fn write_diagnostics<W: Write>(rows: &[DiagnosticRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub steps: usize,
    pub diagnostics: Vec<TrainDiagnostics>,
}

/// Runs one episode. With `train`, actions explore, transitions are stored
/// and an update follows every step once warmup is met; without it the
/// greedy policy is evaluated and nothing is stored.
pub fn run_episode<E: Environment + ?Sized>(agent: &mut DdpgAgent, env: &mut E, train: bool) -> Result<EpisodeStats> {
    let mut state = env.reset()?;
    let mut stats = EpisodeStats { episode_return: 0.0, steps: 0, diagnostics: Vec::new() };
    loop {
        let action = if train { agent.explore(&state)? } else { agent.greedy(&state)? };
        let out = env.step(&action)?;
        stats.episode_return += out.reward;
        stats.steps += 1;
        if train {
            let reward = out.reward * agent.cfg.reward_scale;
            agent.observe(Transition { state, action, next_state: out.next_state.clone(), reward });
            if agent.ready() {
                stats.diagnostics.push(agent.train()?);
            }
        }
        state = out.next_state;
        if out.done {
            break;
        }
    }
    Ok(stats)
}

/// Greedy return of the current policy, averaged over `episodes` resets.
pub fn evaluate<E: Environment + ?Sized>(agent: &mut DdpgAgent, env: &mut E, episodes: usize) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes.max(1) {
        total += run_episode(agent, env, false)?.episode_return;
    }
    Ok(total / episodes.max(1) as f64)
}
