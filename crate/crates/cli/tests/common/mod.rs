#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use fedbt_cli::ExperimentConfig;
use fedbt_core::fl::Augment;
use fedbt_core::models::ModelSpec;

/// A configuration small enough to run the whole pipeline in seconds.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model: ModelSpec {
            input_dims: [3, 8, 8],
            encoder_widths: vec![16],
            repr_dim: 8,
            proj_dim: 4,
            n_classes: 4,
            n_centers: 3,
        },
        ..ExperimentConfig::default()
    };
    for c in &mut cfg.centers {
        c.n_per_class = 5;
    }
    cfg.pseudo_n = 20;
    cfg.ssl.epochs = 2;
    cfg.fl.rounds = 2;
    cfg.fl.augment = Augment::None;
    cfg
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

/// Runs the `fedbt` binary with `--config` and `--out` pointing into `dir`.
pub fn fedbt(dir: &Path, args: &[&str]) -> Output {
    let mut full = vec![
        "--config".to_owned(),
        dir.join("experiment.toml").display().to_string(),
        "--out".to_owned(),
        dir.display().to_string(),
    ];
    full.extend(args.iter().map(|s| s.to_string()));
    Command::new(env!("CARGO_BIN_EXE_fedbt")).args(&full).output().unwrap()
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every stage of the pipeline, through the binary.
pub fn full_pipeline(dir: &Path, cfg: &ExperimentConfig) {
    write_config(dir, cfg);
    ok(&fedbt(dir, &["gen-data"]));
    ok(&fedbt(dir, &["pretrain"]));
    for args in [
        &["--algorithm", "local_only"][..],
        &["--algorithm", "fedavg"],
        &["--algorithm", "fl_bt"],
        &["--algorithm", "fl_bt", "--ssl-init"],
    ] {
        ok(&fedbt(dir, &[&["train"][..], args].concat()));
        ok(&fedbt(dir, &[&["evaluate"][..], args].concat()));
    }
    ok(&fedbt(dir, &["report"]));
}
