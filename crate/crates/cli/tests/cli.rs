use std::path::Path;
use std::process::Command;

use uavlas_core::ExperimentConfig;

fn uavlas() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uavlas"));
    c.env("RUST_LOG", "warn");
    c
}

/// A configuration small enough to run every verb in seconds.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.sweeps.realizations = 3;
    cfg.sweeps.k_list = vec![1, 3];
    cfg.sweeps.episodes = 3;
    cfg.sweeps.held_out_tasks = 2;
    cfg.meta.n_tasks = 6;
    cfg.meta.meta_train_iters = 3;
    cfg.meta.adapt_iters = 20;
    cfg.meta.eval_every = 10;
    cfg.agent.hidden_width = 8;
    cfg.agent.hidden_layers = 1;
    cfg.agent.batch_size = 8;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn shipped_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
}

#[test]
fn rsma_vs_oma_writes_results_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let status = uavlas().args(["rsma-vs-oma", "--config"]).arg(&cfg).arg("--out").arg(&out).args(["--seed", "5"]).output().unwrap().status;
    assert!(status.success());
    for f in ["rsma_vs_oma.csv", "assertions.csv", "config.toml", "record.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let snapshot = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(snapshot.run.seed, 5);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap(), snapshot.content_hash().unwrap());
    assert_eq!(manifest["master_seed"].as_u64(), Some(5));
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for name in ["a", "b"] {
        let status = uavlas().args(["lens-sweep", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join(name)).output().unwrap().status;
        assert!(status.success());
    }
    let read = |n: &str| std::fs::read(dir.path().join(n).join("lens_sweep.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn verify_exit_code_tracks_assertions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("verify");
    let status = uavlas().args(["verify", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap().status;
    let mut rdr = csv::Reader::from_path(out.join("assertions.csv")).unwrap();
    let rows: Vec<uavlas_core::Assertion> = rdr.deserialize().map(|r| r.unwrap()).collect();
    assert!(rows.len() >= 10);
    let any_failed = rows.iter().any(|a| a.gating && !a.passed);
    assert_eq!(status.code(), Some(if any_failed { 1 } else { 0 }));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = ExperimentConfig::default().to_toml().unwrap().replace("p_max = 50.0", "p_max = -1.0");
    std::fs::write(&path, text).unwrap();
    let out = uavlas().args(["ee-table", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("p_max"));
}
