use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use uavlas_core::experiment::{default_out_dir, emit_results, run, Experiment};
use uavlas_core::ExperimentConfig;

/// LAS-UAV RSMA link simulator and meta-initialized DDPG allocator.
#[derive(Parser)]
#[command(name = "uavlas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Training curves of meta-initialized vs randomly initialized DDPG on a held-out task.
    Convergence(Common),
    /// Sum SE vs SNR for each lens count.
    LensSweep(Common),
    /// RSMA vs OMA sum SE over user counts and SNR.
    RsmaVsOma(Common),
    /// Energy efficiency of multi- vs single-lens transmitters.
    EeTable(Common),
    /// Adaptation on held-out tasks from both initializations.
    Adapt(Common),
    /// Runs every study and checks the expected orderings; exits nonzero on failure.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `<run.out_dir>/<run.name>/<experiment>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Long-running sizes (1000 tasks, 10^4 meta iterations, 256-wide networks).
    #[arg(long)]
    full: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    let (experiment, common) = match cli.command {
        Command::Convergence(c) => (Experiment::Convergence, c),
        Command::LensSweep(c) => (Experiment::LensSweep, c),
        Command::RsmaVsOma(c) => (Experiment::RsmaVsOma, c),
        Command::EeTable(c) => (Experiment::EeTable, c),
        Command::Adapt(c) => (Experiment::Adapt, c),
        Command::Verify(c) => (Experiment::Verify, c),
    };
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if common.full {
        cfg.full_scale();
    }
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    cfg.validate()?;
    let dir = common.out.clone().unwrap_or_else(|| default_out_dir(&cfg, experiment));
    let started = Instant::now();
    log::info!("{} (seed {}) -> {}", experiment.name(), cfg.run.seed, dir.display());
    let out = run(experiment, &cfg)?;
    let record = emit_results(&dir, experiment, &cfg, &out, started)?;
    for a in &out.assertions {
        let tag = match (a.gating, a.passed) {
            (false, _) => "INFO",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        println!("{tag} {:<26} measured {:>10.4}  threshold {:>8.4}  {}", a.name, a.measured, a.threshold, a.detail);
    }
    println!("wrote {} ({:.1} s)", dir.display(), record.wall_clock_s);
    let failed = out.failed();
    if experiment == Experiment::Verify && !failed.is_empty() {
        eprintln!("{} assertion(s) failed", failed.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
