//! Experiment configuration: strict TOML schema, validation and content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocator::SearchConfig;
use crate::array_channel::LasConfig;
use crate::ddpg::AgentConfig;
use crate::error::{Error, Result};
use crate::mdp_env::ScenarioConfig;
use crate::meta::MetaConfig;
use crate::rsma_rates::PowerModel;

/// Grids and sample sizes of the evaluation studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_db: Vec<f64>,
    pub lens_counts: Vec<usize>,
    pub k_list: Vec<usize>,
    /// Channel realizations per cell.
    pub realizations: usize,
    /// Cell whose RSMA gain is reported against the reference figure.
    pub reference_snr_db: f64,
    pub reference_k: usize,
    /// Training episodes per arm in the convergence study.
    pub episodes: usize,
    /// Held-out tasks for the adaptation comparison.
    pub held_out_tasks: usize,
    /// User counts compared in the user-scaling check (fewer, more).
    pub user_scaling: [usize; 2],
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            lens_counts: vec![1, 2, 4],
            k_list: vec![1, 2, 3, 4],
            realizations: 100,
            reference_snr_db: 10.0,
            reference_k: 3,
            episodes: 200,
            held_out_tasks: 10,
            user_scaling: [4, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { name: "desk".into(), seed: 2024, out_dir: PathBuf::from("results") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub las: LasConfig,
    pub power: PowerModel,
    pub agent: AgentConfig,
    pub meta: MetaConfig,
    #[serde(default)]
    pub search: SearchConfig,
    pub sweeps: SweepConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults; [`ExperimentConfig::full_scale`] restores the
    /// long-running sizes.
    fn default() -> Self {
        ExperimentConfig {
            scenario: ScenarioConfig::default(),
            las: LasConfig::default(),
            power: PowerModel::default(),
            agent: AgentConfig {
                hidden_width: 64,
                lr_actor: 1e-4,
                noise_decay_steps: 4000,
                reward_scale: 0.1,
                ..AgentConfig::default()
            },
            meta: MetaConfig {
                n_tasks: 50,
                meta_train_iters: 1500,
                lr_global_actor: 3e-3,
                lr_local_actor: 3e-3,
                ..MetaConfig::default()
            },
            search: SearchConfig::default(),
            sweeps: SweepConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.las.validate()?;
        self.power.validate()?;
        self.agent.validate()?;
        self.meta.validate()?;
        self.search.validate()?;
        let p_las = self.power.p_las(self.las.n_rf);
        if !(self.scenario.p_max > p_las + self.power.p_hov) {
            return Err(Error::config("scenario.p_max", "must exceed the transmitter and hovering power"));
        }
        let s = &self.sweeps;
        if s.snr_db.is_empty() || s.snr_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("sweeps.snr_db", "must be a non-empty list of finite values"));
        }
        if s.lens_counts.is_empty() {
            return Err(Error::config("sweeps.lens_counts", "must not be empty"));
        }
        for &n in &s.lens_counts {
            if n == 0 || self.las.n_t % n != 0 {
                return Err(Error::config("sweeps.lens_counts", format!("{n} does not divide n_t = {}", self.las.n_t)));
            }
        }
        let cap = self.scenario.n_beams * self.scenario.beam_cap;
        if s.k_list.is_empty() || s.k_list.iter().any(|&k| k == 0 || k > cap) {
            return Err(Error::config("sweeps.k_list", format!("entries must lie in 1..={cap}")));
        }
        if s.reference_k == 0 || s.reference_k > cap || s.user_scaling.iter().any(|&k| k == 0 || k > cap) {
            return Err(Error::config("sweeps.reference_k/user_scaling", format!("must lie in 1..={cap}")));
        }
        if s.realizations == 0 || s.episodes == 0 || s.held_out_tasks == 0 {
            return Err(Error::config("sweeps.realizations/episodes/held_out_tasks", "must be positive"));
        }
        if self.run.name.is_empty() {
            return Err(Error::config("run.name", "must not be empty"));
        }
        Ok(())
    }

    /// Long-running sizes: 1000 tasks, 10^4 meta iterations, 500 episodes per
    /// arm, 500 channel realizations, 256-wide hidden layers.
    pub fn full_scale(&mut self) {
        self.meta.n_tasks = 1000;
        self.meta.meta_train_iters = 10_000;
        self.sweeps.episodes = 500;
        self.sweeps.realizations = 500;
        self.agent.hidden_width = 256;
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Git-style blob hash of the canonical TOML rendering.
    pub fn content_hash(&self) -> Result<String> {
        let body = self.to_toml()?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash().unwrap(), cfg.content_hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let text = ExperimentConfig::default().to_toml().unwrap().replace("[run]", "[run]\nbogus = 1");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn negative_power_names_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.p_max = -1.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("p_max"), "{err}");
    }

    #[test]
    fn lens_counts_must_divide() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweeps.lens_counts = vec![3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.run.seed += 1;
        assert_ne!(a.content_hash().unwrap(), b.content_hash().unwrap());
    }
}
