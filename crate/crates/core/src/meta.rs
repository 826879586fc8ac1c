//! First-order MAML over the task distribution: plain-gradient local phases on
//! per-task support sets, a synchronous global step on the query losses
//! evaluated at the local parameters, and few-step adaptation on new tasks.

use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpg::{
    act, actor_objective_grad, batch_targets, critic_loss_grad, evaluate, run_episode, AgentConfig, Batch, DdpgAgent,
    Environment, ReplayBuffer, Transition,
};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, Checkpoint, GradientSet, MlpParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Size of the meta task set.
    pub n_tasks: usize,
    pub tasks_per_batch: usize,
    pub local_steps: usize,
    pub lr_local_actor: f64,
    pub lr_local_critic: f64,
    pub lr_global_actor: f64,
    pub lr_global_critic: f64,
    pub support_size: usize,
    pub query_size: usize,
    /// Global iterations of meta-training.
    pub meta_train_iters: usize,
    /// Training iterations (environment step + update) when adapting.
    pub adapt_iters: usize,
    /// Episodes collected per task before each local phase.
    pub collect_episodes: usize,
    pub explore_noise: f64,
    /// Replay warmup used during adaptation, identical for every arm.
    pub adapt_warmup: usize,
    pub eval_episodes: usize,
    pub eval_every: usize,
    /// Per-task replay memory size during meta-training.
    pub task_memory: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            n_tasks: 1000,
            tasks_per_batch: 5,
            local_steps: 5,
            lr_local_actor: 1e-3,
            lr_local_critic: 1e-2,
            lr_global_actor: 1e-3,
            lr_global_critic: 1e-2,
            support_size: 64,
            query_size: 64,
            meta_train_iters: 10_000,
            adapt_iters: 1000,
            collect_episodes: 1,
            explore_noise: 0.2,
            adapt_warmup: 64,
            eval_episodes: 1,
            eval_every: 100,
            task_memory: 100_000,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("meta.lr_local_actor", self.lr_local_actor),
            ("meta.lr_local_critic", self.lr_local_critic),
            ("meta.lr_global_actor", self.lr_global_actor),
            ("meta.lr_global_critic", self.lr_global_critic),
            ("meta.explore_noise", self.explore_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if self.n_tasks == 0 || self.tasks_per_batch == 0 || self.tasks_per_batch > self.n_tasks {
            return Err(Error::config("meta.tasks_per_batch", "must lie in 1..=n_tasks"));
        }
        if self.support_size == 0 || self.query_size == 0 {
            return Err(Error::config("meta.support_size/query_size", "must be positive"));
        }
        if self.collect_episodes == 0 || self.eval_episodes == 0 || self.eval_every == 0 {
            return Err(Error::config("meta.collect_episodes/eval_episodes/eval_every", "must be positive"));
        }
        if self.task_memory < self.support_size + self.query_size {
            return Err(Error::config("meta.task_memory", "must hold a support and a query set"));
        }
        Ok(())
    }
}

/// Actor and critic parameters moved together through the meta updates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub actor: MlpParams,
    pub critic: MlpParams,
}

impl MetaParams {
    pub fn random(agent: &AgentConfig, state_dim: usize, action_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (actor, critic) = agent.init_networks(state_dim, action_dim, &mut rng);
        MetaParams { actor, critic }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("actor", &self.actor);
        c.insert("critic", &self.critic);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(MetaParams { actor: c.get("actor")?, critic: c.get("critic")? })
    }
}

/// Which losses drive the meta updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub discount: f64,
    pub grad_clip: f64,
    /// Skip the actor: plain regression of the critic onto the targets.
    pub critic_only: bool,
}

impl LossSpec {
    pub fn from_agent(cfg: &AgentConfig) -> Self {
        LossSpec { discount: cfg.discount, grad_clip: cfg.grad_clip, critic_only: false }
    }
}

/// Critic loss, actor objective and their (clipped) gradients at `params`.
/// Bootstrapped targets use `targets`, held fixed during a phase.
#[derive(Debug, Clone)]
pub struct MetaGrads {
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub critic: GradientSet,
    pub actor: Option<GradientSet>,
}

pub fn meta_grads(params: &MetaParams, targets: &MetaParams, batch: &Batch, spec: &LossSpec) -> Result<MetaGrads> {
    let chi = batch_targets(batch, &targets.actor, &targets.critic, spec.discount)?;
    let (critic_loss, mut gc) = critic_loss_grad(&params.critic, batch, &chi)?;
    if !critic_loss.is_finite() {
        return Err(Error::NonFinite("meta critic loss".into()));
    }
    gc.clip_norm(spec.grad_clip);
    let (actor_objective, actor) = if spec.critic_only {
        (0.0, None)
    } else {
        let (obj, mut ga) = actor_objective_grad(&params.actor, &params.critic, &batch.states)?;
        if !obj.is_finite() {
            return Err(Error::NonFinite("meta actor objective".into()));
        }
        ga.clip_norm(spec.grad_clip);
        (obj, Some(ga))
    };
    Ok(MetaGrads { critic_loss, actor_objective, critic: gc, actor })
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: MetaParams,
    /// Mean support critic loss over the local steps.
    pub support_loss: f64,
}

/// `local_steps` plain gradient steps on the support set, starting from a copy
/// of `global`; `global` itself is never modified.
pub fn local_update(global: &MetaParams, support: &Batch, cfg: &MetaConfig, spec: &LossSpec) -> Result<LocalOutcome> {
    if support.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut local = global.clone();
    let mut total = 0.0;
    for _ in 0..cfg.local_steps {
        let g = meta_grads(&local, global, support, spec)?;
        total += g.critic_loss;
        sgd_step(&mut local.critic, &g.critic, cfg.lr_local_critic);
        if let Some(ga) = &g.actor {
            sgd_step(&mut local.actor, ga, cfg.lr_local_actor);
        }
    }
    let support_loss = if cfg.local_steps == 0 {
        meta_grads(&local, global, support, spec)?.critic_loss
    } else {
        total / cfg.local_steps as f64
    };
    Ok(LocalOutcome { params: local, support_loss })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalOutcome {
    /// Sum of the query critic losses over contributing tasks.
    pub query_loss: f64,
    pub actor_objective: f64,
}

/// One first-order step: gradients of the query losses at each task's local
/// parameters, summed over tasks and applied to the global parameters.
pub fn global_update(global: &mut MetaParams, contributions: &[(MetaParams, Batch)], cfg: &MetaConfig, spec: &LossSpec) -> Result<GlobalOutcome> {
    if contributions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut gc = GradientSet::zeros_like(&global.critic);
    let mut ga = GradientSet::zeros_like(&global.actor);
    let mut out = GlobalOutcome { query_loss: 0.0, actor_objective: 0.0 };
    for (local, query) in contributions {
        let g = meta_grads(local, global, query, spec)?;
        out.query_loss += g.critic_loss;
        out.actor_objective += g.actor_objective;
        gc.add_assign(&g.critic);
        if let Some(a) = &g.actor {
            ga.add_assign(a);
        }
    }
    sgd_step(&mut global.critic, &gc, cfg.lr_global_critic);
    if !spec.critic_only {
        sgd_step(&mut global.actor, &ga, cfg.lr_global_actor);
    }
    Ok(out)
}

/// Per-iteration meta-training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaCurveRow {
    pub iteration: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub mean_return: f64,
    pub tasks: usize,
    pub local_phases: usize,
}

pub fn write_meta_curve<W: Write>(rows: &[MetaCurveRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Global parameters plus the latest local parameters of every visited task.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub global: MetaParams,
    pub locals: Vec<Option<MetaParams>>,
    pub iterations: usize,
    pub local_phases: usize,
}

/// Rolls out `actor` with Gaussian noise, appending every transition.
fn collect<E: Environment + ?Sized>(
    actor: &MlpParams,
    env: &mut E,
    noise: f64,
    reward_scale: f64,
    rng: &mut ChaCha8Rng,
    memory: &mut ReplayBuffer,
) -> Result<f64> {
    let mut s = env.reset()?;
    let mut ret = 0.0;
    loop {
        let a = act(actor, &s, noise, rng)?;
        let out = env.step(&a)?;
        ret += out.reward;
        memory.push(Transition { state: s, action: a, next_state: out.next_state.clone(), reward: out.reward * reward_scale });
        s = out.next_state;
        if out.done {
            return Ok(ret);
        }
    }
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    r.random()
}

/// Meta-training over a task set. `make_env(i)` builds the environment of task
/// `i`. Each iteration samples `tasks_per_batch` distinct tasks, runs their
/// local phases (in parallel, each on its own seed stream), then performs one
/// global step over the tasks that succeeded.
pub fn meta_train<E, F>(
    n_tasks: usize,
    make_env: F,
    agent: &AgentConfig,
    cfg: &MetaConfig,
    init: MetaParams,
    seed: u64,
) -> Result<(MetaState, Vec<MetaCurveRow>)>
where
    E: Environment,
    F: Fn(usize) -> Result<E> + Sync,
{
    cfg.validate()?;
    agent.validate()?;
    if n_tasks < cfg.tasks_per_batch {
        return Err(Error::config("meta.tasks_per_batch", "exceeds the number of tasks"));
    }
    let spec = LossSpec::from_agent(agent);
    let mut state = MetaState { global: init, locals: vec![None; n_tasks], iterations: 0, local_phases: 0 };
    let mut memories: Vec<Option<ReplayBuffer>> = vec![None; n_tasks];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(cfg.meta_train_iters);

    for it in 0..cfg.meta_train_iters {
        let picked = index::sample(&mut rng, n_tasks, cfg.tasks_per_batch).into_vec();
        let mut work: Vec<(usize, ReplayBuffer, Option<MetaParams>)> = picked
            .iter()
            .map(|&i| (i, memories[i].take().unwrap_or_else(|| ReplayBuffer::new(cfg.task_memory)), state.locals[i].take()))
            .collect();
        let global = &state.global;
        let results: Vec<Result<(f64, LocalOutcome, Batch)>> = work
            .par_iter_mut()
            .map(|(i, memory, local)| {
                let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(seed, it as u64, *i as u64));
                let mut env = make_env(*i)?;
                let behaviour = local.as_ref().map_or(&global.actor, |p| &p.actor);
                let mut ret = 0.0;
                for _ in 0..cfg.collect_episodes {
                    ret += collect(behaviour, &mut env, cfg.explore_noise, agent.reward_scale, &mut trng, memory)?;
                }
                let (support, query) = memory.sample_disjoint(cfg.support_size, cfg.query_size, &mut trng)?;
                let outcome = local_update(global, &support, cfg, &spec)?;
                Ok((ret / cfg.collect_episodes as f64, outcome, query))
            })
            .collect();

        let mut contributions = Vec::new();
        let (mut support_loss, mut ret) = (0.0, 0.0);
        for ((i, memory, previous), res) in work.into_iter().zip(results) {
            memories[i] = Some(memory);
            match res {
                Ok((r, outcome, query)) => {
                    support_loss += outcome.support_loss;
                    ret += r;
                    state.locals[i] = Some(outcome.params.clone());
                    contributions.push((outcome.params, query));
                }
                Err(e) => {
                    log::warn!("meta iteration {it}: task {i} skipped: {e}");
                    state.locals[i] = previous;
                }
            }
        }
        state.local_phases += contributions.len();
        let n = contributions.len();
        let query_loss = if n > 0 { global_update(&mut state.global, &contributions, cfg, &spec)?.query_loss / n as f64 } else { f64::NAN };
        state.iterations += 1;
        let denom = n.max(1) as f64;
        curve.push(MetaCurveRow {
            iteration: it,
            support_loss: support_loss / denom,
            query_loss,
            mean_return: ret / denom,
            tasks: n,
            local_phases: state.local_phases,
        });
    }
    Ok((state, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptPoint {
    pub iteration: usize,
    pub eval_return: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub agent: DdpgAgent,
    pub before: f64,
    pub after: f64,
    pub curve: Vec<AdaptPoint>,
}

/// Standard DDPG training for `cfg.adapt_iters` environment steps from the
/// given initialization, with greedy evaluations along the way.
pub fn meta_adapt<E: Environment + ?Sized>(init: &MetaParams, env: &mut E, agent: &AgentConfig, cfg: &MetaConfig, seed: u64) -> Result<AdaptOutcome> {
    let acfg = AgentConfig { warmup_steps: cfg.adapt_warmup, ..agent.clone() };
    let mut ag = DdpgAgent::from_params(acfg, init.actor.clone(), init.critic.clone(), seed)?;
    let before = evaluate(&mut ag, env, cfg.eval_episodes)?;
    let mut curve = vec![AdaptPoint { iteration: 0, eval_return: before }];
    let mut done = 0;
    while done < cfg.adapt_iters {
        let stats = run_episode(&mut ag, env, true)?;
        let next = done + stats.steps;
        if next / cfg.eval_every > done / cfg.eval_every {
            curve.push(AdaptPoint { iteration: next, eval_return: evaluate(&mut ag, env, cfg.eval_episodes)? });
        }
        done = next;
    }
    let after = if cfg.adapt_iters == 0 { before } else { evaluate(&mut ag, env, cfg.eval_episodes)? };
    if curve.last().map(|p| p.iteration) != Some(done) {
        curve.push(AdaptPoint { iteration: done, eval_return: after });
    }
    Ok(AdaptOutcome { agent: ag, before, after, curve })
}
