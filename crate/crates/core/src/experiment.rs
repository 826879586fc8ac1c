//! Experiment runner: convergence of meta-initialized vs plain DDPG, lens and
//! SNR sweeps, RSMA vs OMA, energy-efficiency table, the named assertion
//! suite, and result persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{optimize_oma, optimize_rsma, Allocation};
use crate::array_channel::{ChannelDraws, GroundUser, LasConfig, UavPose};
use crate::config::ExperimentConfig;
use crate::ddpg::{run_episode, AgentConfig, DdpgAgent};
use crate::error::{Error, Result};
use crate::mdp_env::{sample_tasks, LasEnv, ScenarioConfig, StepRecord, Task};
use crate::meta::{meta_adapt, meta_train, MetaCurveRow, MetaParams};
use crate::precoding::{aggregate_lens_scores, build_precoders, cluster_users, select_lens_beams, uniform_codebook};
use crate::rsma_rates::{noise_from_snr, GainTable, PowerAllocation};

/// Independent seed for a labelled sub-stream of the master seed.
pub fn stream_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let tag = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    rng.set_stream(tag ^ index.rotate_left(32));
    rng.random()
}

/// Mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Standard error of `mean(a) / mean(b)` for paired samples (delta method).
pub fn ratio_stderr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let (ma, mb) = (mean_se(a).0, mean_se(b).0);
    let ratio = ma / mb;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - ratio * y).collect();
    mean_se(&d).1 / mb.abs()
}

/// One static drop: user positions and channel draws for `k` users.
#[derive(Debug, Clone)]
pub struct Drop {
    pub users: Vec<GroundUser>,
    pub draws: ChannelDraws,
}

impl Drop {
    pub fn sample(scenario: &ScenarioConfig, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users = (0..k)
            .map(|id| GroundUser {
                id,
                q: [
                    rng.random_range(scenario.q_min[0]..=scenario.q_max[0]),
                    rng.random_range(scenario.q_min[1]..=scenario.q_max[1]),
                ],
            })
            .collect();
        let draws = ChannelDraws::sample_with(k, &mut rng);
        Drop { users, draws }
    }
}

/// Search-allocated RSMA and OMA outcomes for one drop at the box center.
#[derive(Debug, Clone)]
pub struct StaticOutcome {
    pub rsma: Allocation,
    pub oma: Allocation,
}

pub fn evaluate_drop(
    scenario: &ScenarioConfig,
    las: &LasConfig,
    cfg: &ExperimentConfig,
    snr_db: f64,
    drop: &Drop,
) -> Result<StaticOutcome> {
    let pose = UavPose { q: scenario.center(), z: scenario.altitude };
    let channel = drop.draws.realize(las, &pose, &drop.users)?;
    let assignment = cluster_users(&channel, &uniform_codebook(las, scenario.n_beams), scenario.beam_cap)?;
    let selected = select_lens_beams(&aggregate_lens_scores(las, &channel.h));
    let precoders = build_precoders(las, &channel, &assignment, &selected, scenario.cond_limit)?;
    let gains = GainTable::new(&channel.h, &precoders);
    let p_las = cfg.power.p_las(las.n_rf);
    let k = drop.users.len();
    let noise = noise_from_snr(snr_db, scenario.p_max, p_las, cfg.power.p_hov, k)?;
    let template = PowerAllocation::zeros(assignment.n_beams, k, p_las, cfg.power.p_hov, scenario.p_max);
    let rsma = optimize_rsma(&gains, &assignment, &template, noise, &scenario.rate, &cfg.search)?;
    let oma = optimize_oma(&gains, &assignment, &template, noise, &cfg.search)?;
    Ok(StaticOutcome { rsma, oma })
}

/// Evaluates the first `realizations` usable drops of the cell's drop stream;
/// rank-deficient drops are skipped and counted. Drops are shared across SNRs
/// and architectures, so cells are paired.
fn evaluate_cell(cfg: &ExperimentConfig, las: &LasConfig, k: usize, snr_db: f64) -> Result<(Vec<StaticOutcome>, usize)> {
    let scenario = ScenarioConfig { k_users: k, ..cfg.scenario.clone() };
    let want = cfg.sweeps.realizations;
    let mut out = Vec::with_capacity(want);
    let mut skipped = 0;
    let mut next = 0u64;
    while out.len() < want {
        if skipped > 10 * want {
            return Err(Error::RankDeficient { condition: f64::INFINITY });
        }
        let chunk = (want - out.len()) as u64;
        let results: Vec<Result<StaticOutcome>> = (next..next + chunk)
            .into_par_iter()
            .map(|i| {
                let drop = Drop::sample(&scenario, k, stream_seed(cfg.run.seed, "drop", (k as u64) << 32 | i));
                evaluate_drop(&scenario, las, cfg, snr_db, &drop)
            })
            .collect();
        next += chunk;
        for r in results {
            match r {
                Ok(o) => out.push(o),
                Err(Error::RankDeficient { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((out, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensRow {
    pub n_lens: usize,
    pub n_rf: usize,
    pub snr_db: f64,
    pub mean_se: f64,
    pub se_stderr: f64,
    pub realizations: usize,
    pub skipped: usize,
}

pub fn run_lens_sweep(cfg: &ExperimentConfig) -> Result<Vec<LensRow>> {
    let mut rows = Vec::new();
    for &n in &cfg.sweeps.lens_counts {
        let las = cfg.las.with_lenses(n)?;
        for &snr in &cfg.sweeps.snr_db {
            let (outs, skipped) = evaluate_cell(cfg, &las, cfg.scenario.k_users, snr)?;
            let se: Vec<f64> = outs.iter().map(|o| o.rsma.report.sum_se).collect();
            let (m, s) = mean_se(&se);
            rows.push(LensRow { n_lens: n, n_rf: las.n_rf, snr_db: snr, mean_se: m, se_stderr: s, realizations: se.len(), skipped });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsmaOmaRow {
    pub k_users: usize,
    pub snr_db: f64,
    pub rsma_se: f64,
    pub oma_se: f64,
    /// Ratio of cell means.
    pub ratio: f64,
    pub gain_pct: f64,
    /// Half-width of the 95% interval on the gain, in percent (delta method
    /// on the ratio of paired means).
    pub gain_ci95_pct: f64,
    pub min_drop_ratio: f64,
    pub realizations: usize,
    pub skipped: usize,
}

pub fn run_rsma_vs_oma(cfg: &ExperimentConfig) -> Result<Vec<RsmaOmaRow>> {
    let mut rows = Vec::new();
    for &k in &cfg.sweeps.k_list {
        for &snr in &cfg.sweeps.snr_db {
            let (outs, skipped) = evaluate_cell(cfg, &cfg.las, k, snr)?;
            let r: Vec<f64> = outs.iter().map(|o| o.rsma.report.sum_se).collect();
            let o: Vec<f64> = outs.iter().map(|o| o.oma.report.sum_se).collect();
            let (rm, _) = mean_se(&r);
            let (om, _) = mean_se(&o);
            let ratio = rm / om;
            rows.push(RsmaOmaRow {
                k_users: k,
                snr_db: snr,
                rsma_se: rm,
                oma_se: om,
                ratio,
                gain_pct: 100.0 * (ratio - 1.0),
                gain_ci95_pct: 100.0 * 1.96 * ratio_stderr(&r, &o),
                min_drop_ratio: r.iter().zip(&o).map(|(a, b)| a / b).fold(f64::INFINITY, f64::min),
                realizations: r.len(),
                skipped,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EeRow {
    pub architecture: String,
    pub n_lens: usize,
    pub snr_db: f64,
    pub ee: f64,
    pub ee_stderr: f64,
    pub mean_se: f64,
    pub consumed_w: f64,
}

pub fn run_ee_table(cfg: &ExperimentConfig) -> Result<Vec<EeRow>> {
    let mut rows = Vec::new();
    for (name, n) in [("multi-lens", cfg.las.n_lens), ("single-lens", 1)] {
        let las = cfg.las.with_lenses(n)?;
        for &snr in &cfg.sweeps.snr_db {
            let (outs, _) = evaluate_cell(cfg, &las, cfg.scenario.k_users, snr)?;
            let ee: Vec<f64> = outs.iter().map(|o| o.rsma.report.ee).collect();
            let se: Vec<f64> = outs.iter().map(|o| o.rsma.report.sum_se).collect();
            let consumed = outs.first().map_or(f64::NAN, |o| o.rsma.power.consumed_total());
            let (m, s) = mean_se(&ee);
            rows.push(EeRow { architecture: name.into(), n_lens: n, snr_db: snr, ee: m, ee_stderr: s, mean_se: mean_se(&se).0, consumed_w: consumed });
        }
    }
    Ok(rows)
}

/// Meta-training outcome together with the random initialization it started
/// from, which doubles as the plain-DDPG control.
#[derive(Debug, Clone)]
pub struct MetaArtifacts {
    pub random_init: MetaParams,
    pub meta_init: MetaParams,
    pub curve: Vec<MetaCurveRow>,
}

fn make_env(cfg: &ExperimentConfig, task: &Task) -> Result<LasEnv> {
    LasEnv::new(cfg.scenario.clone(), cfg.las.clone(), cfg.power.clone(), task.clone())
}

pub fn training_tasks(cfg: &ExperimentConfig) -> Vec<Task> {
    sample_tasks(&cfg.scenario, cfg.meta.n_tasks, stream_seed(cfg.run.seed, "tasks", 0))
}

pub fn held_out_tasks(cfg: &ExperimentConfig) -> Vec<Task> {
    sample_tasks(&cfg.scenario, cfg.sweeps.held_out_tasks, stream_seed(cfg.run.seed, "held-out", 0))
}

pub fn train_meta_init(cfg: &ExperimentConfig) -> Result<MetaArtifacts> {
    let tasks = training_tasks(cfg);
    let probe = make_env(cfg, &tasks[0])?;
    let random_init = MetaParams::random(&cfg.agent, probe.state_dim(), probe.action_dim(), stream_seed(cfg.run.seed, "init", 0));
    let (state, curve) = meta_train(
        tasks.len(),
        |i| make_env(cfg, &tasks[i]),
        &cfg.agent,
        &cfg.meta,
        random_init.clone(),
        stream_seed(cfg.run.seed, "meta", 0),
    )?;
    Ok(MetaArtifacts { random_init, meta_init: state.global, curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// Per-episode training return averaged over the held-out tasks.
pub struct ConvergenceRow {
    pub episode: usize,
    pub meta_return: f64,
    pub plain_return: f64,
}

fn training_curve(cfg: &ExperimentConfig, init: &MetaParams, task: &Task, agent_cfg: &AgentConfig) -> Result<Vec<f64>> {
    let mut env = make_env(cfg, task)?;
    let seed = stream_seed(cfg.run.seed, "convergence-agent", task.id as u64);
    let mut agent = DdpgAgent::from_params(agent_cfg.clone(), init.actor.clone(), init.critic.clone(), seed)?;
    (0..cfg.sweeps.episodes).map(|_| run_episode(&mut agent, &mut env, true).map(|s| s.episode_return)).collect()
}

/// Training-return curves of meta-initialized and randomly initialized DDPG
/// on the first held-out task, under identical seeds and budgets.
pub fn run_convergence(cfg: &ExperimentConfig, meta: &MetaArtifacts) -> Result<Vec<ConvergenceRow>> {
    let tasks = held_out_tasks(cfg);
    let agent_cfg = AgentConfig { warmup_steps: cfg.meta.adapt_warmup, ..cfg.agent.clone() };
    let curves: Vec<(Vec<f64>, Vec<f64>)> = tasks
        .par_iter()
        .map(|task| {
            let (m, p) = rayon::join(
                || training_curve(cfg, &meta.meta_init, task, &agent_cfg),
                || training_curve(cfg, &meta.random_init, task, &agent_cfg),
            );
            Ok((m?, p?))
        })
        .collect::<Result<_>>()?;
    let n = tasks.len() as f64;
    Ok((0..cfg.sweeps.episodes)
        .map(|episode| ConvergenceRow {
            episode,
            meta_return: curves.iter().map(|c| c.0[episode]).sum::<f64>() / n,
            plain_return: curves.iter().map(|c| c.1[episode]).sum::<f64>() / n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    pub task: usize,
    pub arm: String,
    pub iteration: usize,
    pub eval_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub tasks: usize,
    pub meta_before: f64,
    pub meta_after: f64,
    pub random_before: f64,
    pub random_after: f64,
    /// Relative advantage `(meta - random) / |random|` of the adapted returns.
    pub advantage: f64,
}

/// Adapts both initializations on every held-out task with the same budget and seeds.
pub fn run_adapt(cfg: &ExperimentConfig, meta: &MetaArtifacts) -> Result<(AdaptSummary, Vec<AdaptRow>, Vec<TraceRow>)> {
    let tasks = held_out_tasks(cfg);
    let per_task: Vec<Result<Vec<(String, crate::meta::AdaptOutcome)>>> = tasks
        .par_iter()
        .map(|task| {
            let seed = stream_seed(cfg.run.seed, "adapt", task.id as u64);
            let mut out = Vec::new();
            for (arm, init) in [("meta", &meta.meta_init), ("random", &meta.random_init)] {
                let mut env = make_env(cfg, task)?;
                out.push((arm.to_string(), meta_adapt(init, &mut env, &cfg.agent, &cfg.meta, seed)?));
            }
            Ok(out)
        })
        .collect();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let (mut mb, mut ma, mut rb, mut ra) = (0.0, 0.0, 0.0, 0.0);
    for (task, res) in tasks.iter().zip(per_task) {
        for (arm, o) in res? {
            let mut env = make_env(cfg, task)?;
            traces.extend(greedy_trace(&o.agent, &mut env)?.into_iter().map(|r| TraceRow::new(task.id, &arm, r)));
            if arm == "meta" {
                mb += o.before;
                ma += o.after;
            } else {
                rb += o.before;
                ra += o.after;
            }
            rows.extend(o.curve.iter().map(|p| AdaptRow { task: task.id, arm: arm.clone(), iteration: p.iteration, eval_return: p.eval_return }));
        }
    }
    let n = tasks.len() as f64;
    let (mb, ma, rb, ra) = (mb / n, ma / n, rb / n, ra / n);
    Ok((
        AdaptSummary { tasks: tasks.len(), meta_before: mb, meta_after: ma, random_before: rb, random_after: ra, advantage: (ma - ra) / ra.abs() },
        rows,
        traces,
    ))
}

/// One greedy step of an adapted agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub task: usize,
    pub arm: String,
    pub step: usize,
    pub reward: f64,
    pub sum_se: f64,
    pub ee: f64,
    pub x: f64,
    pub y: f64,
    pub penalty: f64,
}

impl TraceRow {
    fn new(task: usize, arm: &str, r: StepRecord) -> Self {
        TraceRow { task, arm: arm.into(), step: r.step, reward: r.reward, sum_se: r.sum_se, ee: r.ee, x: r.x, y: r.y, penalty: r.penalty }
    }
}

/// Per-step metrics of one noise-free episode.
pub fn greedy_trace(agent: &DdpgAgent, env: &mut LasEnv) -> Result<Vec<StepRecord>> {
    let mut state = env.reset()?;
    let mut out = Vec::new();
    loop {
        let o = env.step(&agent.greedy(&state)?)?;
        out.push(StepRecord::from_outcome(env.step_index(), &o));
        if o.done {
            return Ok(out);
        }
        state = o.next_state;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserScalingRow {
    pub k_users: usize,
    pub snr_db: f64,
    pub mean_se: f64,
    pub se_stderr: f64,
}

/// Search-allocated sum SE for each user count of `sweeps.user_scaling`.
pub fn run_user_scaling(cfg: &ExperimentConfig) -> Result<Vec<UserScalingRow>> {
    let snr = cfg.scenario.snr_db[0];
    cfg.sweeps
        .user_scaling
        .iter()
        .map(|&k| {
            let (outs, _) = evaluate_cell(cfg, &cfg.las, k, snr)?;
            let se: Vec<f64> = outs.iter().map(|o| o.rsma.report.sum_se).collect();
            let (m, s) = mean_se(&se);
            Ok(UserScalingRow { k_users: k, snr_db: snr, mean_se: m, se_stderr: s })
        })
        .collect()
}

/// One named directional check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    /// Whether failure makes the suite fail; reference-only checks report a
    /// measured value against a published one.
    pub gating: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Assertion {
    fn check(name: &str, passed: bool, measured: f64, threshold: f64, detail: String) -> Self {
        Assertion { name: name.into(), passed, gating: true, measured, threshold, detail }
    }

    fn reference(name: &str, measured: f64, reference: f64, detail: String) -> Self {
        Assertion { name: name.into(), passed: true, gating: false, measured, threshold: reference, detail }
    }
}

/// Relative tolerance for ratio-type comparisons that hold with equality in
/// degenerate cells.
pub const RATIO_TOLERANCE: f64 = 1e-12;
/// Required relative advantage of the meta-initialized agent after adaptation.
pub const META_MARGIN: f64 = 0.05;

pub fn rsma_assertions(rows: &[RsmaOmaRow], cfg: &ExperimentConfig) -> Vec<Assertion> {
    let worst = rows.iter().min_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let mut out = vec![Assertion::check(
        "rsma_ge_oma",
        rows.iter().all(|r| r.ratio >= 1.0 - RATIO_TOLERANCE),
        worst.map_or(f64::NAN, |r| r.ratio),
        1.0,
        worst.map_or(String::new(), |r| format!("lowest cell ratio at K={}, {} dB", r.k_users, r.snr_db)),
    )];
    if let Some(r) = rows.iter().find(|r| r.k_users == cfg.sweeps.reference_k && r.snr_db == cfg.sweeps.reference_snr_db) {
        out.push(Assertion::reference(
            "rsma_gain_reference_cell",
            r.gain_pct,
            22.0,
            format!("K={}, {} dB: gain {:.1}% ± {:.1}% (95%), reference 22%", r.k_users, r.snr_db, r.gain_pct, r.gain_ci95_pct),
        ));
    }
    out
}

pub fn lens_assertions(rows: &[LensRow]) -> Vec<Assertion> {
    let mut out = Vec::new();
    let min_lens = rows.iter().map(|r| r.n_lens).min();
    let max_lens = rows.iter().map(|r| r.n_lens).max();
    if let (Some(lo), Some(hi)) = (min_lens, max_lens) {
        let mut worst = f64::INFINITY;
        for r in rows.iter().filter(|r| r.n_lens == hi) {
            if let Some(b) = rows.iter().find(|b| b.n_lens == lo && b.snr_db == r.snr_db) {
                worst = worst.min(r.mean_se - b.mean_se);
            }
        }
        out.push(Assertion::check(
            "lens_ordering",
            worst >= 0.0,
            worst,
            0.0,
            format!("min over SNR of SE(N_Lens={hi}) - SE(N_Lens={lo})"),
        ));
    }
    let mut worst = f64::INFINITY;
    let mut lens: Vec<usize> = rows.iter().map(|r| r.n_lens).collect();
    lens.dedup();
    for n in lens {
        let mut cells: Vec<&LensRow> = rows.iter().filter(|r| r.n_lens == n).collect();
        cells.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
        for w in cells.windows(2) {
            worst = worst.min(w[1].mean_se - w[0].mean_se);
        }
    }
    out.push(Assertion::check("se_nondecreasing_in_snr", worst >= 0.0, worst, 0.0, "min SE step between consecutive SNRs".into()));
    out
}

pub fn ee_assertions(rows: &[EeRow]) -> Vec<Assertion> {
    let mut multi: Vec<&EeRow> = rows.iter().filter(|r| r.architecture == "multi-lens").collect();
    let mut single: Vec<&EeRow> = rows.iter().filter(|r| r.architecture == "single-lens").collect();
    multi.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
    single.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
    let gaps: Vec<f64> = multi.iter().zip(&single).map(|(m, s)| m.ee - s.ee).collect();
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let widen = match (gaps.first(), gaps.last()) {
        (Some(a), Some(b)) => b - a,
        _ => f64::NAN,
    };
    let step = multi.windows(2).map(|w| w[1].ee - w[0].ee).fold(f64::INFINITY, f64::min);
    let mut out = vec![
        Assertion::check("ee_multi_gt_single", min_gap > 0.0, min_gap, 0.0, "min over SNR of EE(multi) - EE(single)".into()),
        Assertion::check("ee_gap_widens", widen > 0.0, widen, 0.0, "gap(highest SNR) - gap(lowest SNR)".into()),
        Assertion::check("ee_multi_nondecreasing", step >= 0.0, step, 0.0, "min EE step between consecutive SNRs".into()),
    ];
    if let Some((m, s)) = multi.iter().zip(&single).find(|(m, _)| m.snr_db == 15.0) {
        let gain = 100.0 * (m.ee / s.ee - 1.0);
        out.push(Assertion::reference("ee_gain_15db_reference", gain, 13.0, format!("EE gain at 15 dB {gain:.1}%, reference 13%")));
    }
    out
}

pub fn user_scaling_assertion(rows: &[UserScalingRow]) -> Assertion {
    let (few, many) = (&rows[0], &rows[rows.len() - 1]);
    Assertion::check(
        "more_users_more_se",
        many.mean_se >= few.mean_se,
        many.mean_se - few.mean_se,
        0.0,
        format!("SE(K={}) - SE(K={}) at {} dB", many.k_users, few.k_users, few.snr_db),
    )
}

/// Sign-robust margin: `meta >= random + margin · |random|`.
pub fn meta_assertion(s: &AdaptSummary) -> Assertion {
    let passed = s.meta_after >= s.random_after + META_MARGIN * s.random_after.abs();
    Assertion::check(
        "meta_advantage",
        passed,
        s.advantage,
        META_MARGIN,
        format!(
            "{} held-out tasks: adapted return meta {:.2} vs random {:.2} (before: {:.2} vs {:.2}); reference 27%",
            s.tasks, s.meta_after, s.random_after, s.meta_before, s.random_before
        ),
    )
}

pub fn convergence_assertion(rows: &[ConvergenceRow]) -> Assertion {
    let tail = rows.len().min(100);
    let slice = &rows[rows.len() - tail..];
    let m = slice.iter().map(|r| r.meta_return).sum::<f64>() / tail as f64;
    let p = slice.iter().map(|r| r.plain_return).sum::<f64>() / tail as f64;
    Assertion::check("meta_convergence_tail", m >= p, m - p, 0.0, format!("final-{tail}-episode mean return meta {m:.2} vs plain {p:.2}"))
}

/// With meta-training disabled both arms start from the same parameters and
/// must produce identical curves.
pub fn control_assertion(cfg: &ExperimentConfig) -> Result<Assertion> {
    let mut c = cfg.clone();
    c.meta.meta_train_iters = 0;
    c.sweeps.episodes = c.sweeps.episodes.min(20);
    let arts = train_meta_init(&c)?;
    let rows = run_convergence(&c, &arts)?;
    let same = rows.iter().all(|r| r.meta_return.to_bits() == r.plain_return.to_bits());
    Ok(Assertion::check("meta_disabled_control", same, rows.len() as f64, 0.0, "curves identical when meta-training is off".into()))
}

/// Serializes rows as CSV text.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Everything an experiment produced, ready to be written.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub csv: Vec<(String, String)>,
    pub assertions: Vec<Assertion>,
    pub summary: serde_json::Map<String, serde_json::Value>,
    /// Wall-clock seconds per study; recorded, never written to CSV.
    pub timings: Vec<(String, f64)>,
}

fn timed<T>(out: &mut Outputs, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let v = f()?;
    out.timings.push((name.to_string(), t.elapsed().as_secs_f64()));
    Ok(v)
}

impl Outputs {
    pub fn add_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        self.csv.push((name.to_string(), to_csv(rows)?));
        Ok(())
    }

    pub fn failed(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| a.gating && !a.passed).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Convergence,
    LensSweep,
    RsmaVsOma,
    EeTable,
    Verify,
    Adapt,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Convergence => "convergence",
            Experiment::LensSweep => "lens-sweep",
            Experiment::RsmaVsOma => "rsma-vs-oma",
            Experiment::EeTable => "ee-table",
            Experiment::Verify => "verify",
            Experiment::Adapt => "adapt",
        }
    }
}

fn meta_outputs(out: &mut Outputs, arts: &MetaArtifacts) -> Result<()> {
    out.add_csv("meta_curve.csv", &arts.curve)
}

/// Mean SE/EE and QoS-violation counts of the adapted greedy episodes, per arm.
fn trace_summary(out: &mut Outputs, trace: &[TraceRow]) {
    for arm in ["meta", "random"] {
        let rows: Vec<&TraceRow> = trace.iter().filter(|r| r.arm == arm).collect();
        let n = rows.len().max(1) as f64;
        out.summary.insert(format!("{arm}_mean_se"), (rows.iter().map(|r| r.sum_se).sum::<f64>() / n).into());
        out.summary.insert(format!("{arm}_mean_ee"), (rows.iter().map(|r| r.ee).sum::<f64>() / n).into());
        out.summary.insert(format!("{arm}_qos_violation_steps"), rows.iter().filter(|r| r.penalty > 0.0).count().into());
    }
}

/// Runs one experiment and collects its outputs (nothing is written).
pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<Outputs> {
    cfg.validate()?;
    let mut out = Outputs::default();
    match experiment {
        Experiment::LensSweep => {
            let rows = run_lens_sweep(cfg)?;
            out.assertions.extend(lens_assertions(&rows));
            out.add_csv("lens_sweep.csv", &rows)?;
        }
        Experiment::RsmaVsOma => {
            let rows = run_rsma_vs_oma(cfg)?;
            out.assertions.extend(rsma_assertions(&rows, cfg));
            out.add_csv("rsma_vs_oma.csv", &rows)?;
        }
        Experiment::EeTable => {
            let rows = run_ee_table(cfg)?;
            out.assertions.extend(ee_assertions(&rows));
            out.add_csv("ee_table.csv", &rows)?;
        }
        Experiment::Convergence => {
            let arts = train_meta_init(cfg)?;
            let rows = run_convergence(cfg, &arts)?;
            out.assertions.push(convergence_assertion(&rows));
            out.add_csv("convergence.csv", &rows)?;
            meta_outputs(&mut out, &arts)?;
        }
        Experiment::Adapt => {
            let arts = train_meta_init(cfg)?;
            let (summary, rows, trace) = run_adapt(cfg, &arts)?;
            out.assertions.push(meta_assertion(&summary));
            out.add_csv("adapt_curves.csv", &rows)?;
            out.add_csv("adapt_trace.csv", &trace)?;
            trace_summary(&mut out, &trace);
            out.add_csv("adapt_summary.csv", std::slice::from_ref(&summary))?;
            meta_outputs(&mut out, &arts)?;
        }
        Experiment::Verify => {
            let lens = timed(&mut out, "lens_sweep", || run_lens_sweep(cfg))?;
            let rsma = timed(&mut out, "rsma_vs_oma", || run_rsma_vs_oma(cfg))?;
            let ee = timed(&mut out, "ee_table", || run_ee_table(cfg))?;
            let users = timed(&mut out, "user_scaling", || run_user_scaling(cfg))?;
            let (arts, (summary, adapt_rows, trace)) = timed(&mut out, "meta_train_and_adapt", || {
                let arts = train_meta_init(cfg)?;
                let adapt = run_adapt(cfg, &arts)?;
                Ok((arts, adapt))
            })?;
            let conv = timed(&mut out, "convergence", || run_convergence(cfg, &arts))?;
            out.assertions.extend(rsma_assertions(&rsma, cfg));
            out.assertions.extend(lens_assertions(&lens));
            out.assertions.extend(ee_assertions(&ee));
            out.assertions.push(user_scaling_assertion(&users));
            out.assertions.push(meta_assertion(&summary));
            out.assertions.push(convergence_assertion(&conv));
            out.assertions.push(control_assertion(cfg)?);
            out.add_csv("lens_sweep.csv", &lens)?;
            out.add_csv("rsma_vs_oma.csv", &rsma)?;
            out.add_csv("ee_table.csv", &ee)?;
            out.add_csv("user_scaling.csv", &users)?;
            out.add_csv("adapt_curves.csv", &adapt_rows)?;
            out.add_csv("adapt_trace.csv", &trace)?;
            trace_summary(&mut out, &trace);
            out.add_csv("adapt_summary.csv", std::slice::from_ref(&summary))?;
            out.add_csv("convergence.csv", &conv)?;
            meta_outputs(&mut out, &arts)?;
        }
    }
    let assertions = out.assertions.clone();
    out.add_csv("assertions.csv", &assertions)?;
    out.summary.insert("assertions_passed".into(), assertions.iter().filter(|a| a.passed).count().into());
    out.summary.insert("assertions_failed".into(), out.failed().len().into());
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to rerun an experiment to identical CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub experiment: String,
    pub config_file: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub derived_seeds: Vec<(String, u64)>,
    pub command: String,
    pub files: Vec<FileDigest>,
}

/// Run record: configuration snapshot, summary and timing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub assertions: Vec<Assertion>,
    pub timings: Vec<(String, f64)>,
    pub wall_clock_s: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Writes CSVs, `config.toml`, `record.json` and `manifest.json` into `dir`.
pub fn emit_results(dir: &Path, experiment: Experiment, cfg: &ExperimentConfig, out: &Outputs, started: Instant) -> Result<RunRecord> {
    fs::create_dir_all(dir)?;
    let hash = cfg.content_hash()?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut files = Vec::new();
    for (name, body) in &out.csv {
        fs::write(dir.join(name), body)?;
        files.push(FileDigest { file: name.clone(), sha256: sha256_hex(body.as_bytes()) });
    }
    let seed = cfg.run.seed;
    let derived_seeds = vec![
        ("tasks".to_string(), stream_seed(seed, "tasks", 0)),
        ("held-out".to_string(), stream_seed(seed, "held-out", 0)),
        ("init".to_string(), stream_seed(seed, "init", 0)),
        ("meta".to_string(), stream_seed(seed, "meta", 0)),
    ];
    let manifest = Manifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        experiment: experiment.name().to_string(),
        config_file: "config.toml".into(),
        config_hash: hash.clone(),
        master_seed: seed,
        derived_seeds,
        command: format!("uavlas {} --config config.toml", experiment.name()),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let record = RunRecord {
        experiment: experiment.name().to_string(),
        config_hash: hash,
        config: cfg.clone(),
        summary: out.summary.clone(),
        assertions: out.assertions.clone(),
        timings: out.timings.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

/// Default output directory of an experiment: `<run.out_dir>/<run.name>/<experiment>`.
pub fn default_out_dir(cfg: &ExperimentConfig, experiment: Experiment) -> PathBuf {
    cfg.run.out_dir.join(&cfg.run.name).join(experiment.name())
}
