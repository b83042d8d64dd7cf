#![allow(dead_code)]

use std::path::PathBuf;

use cbln::datasets::{data_root, mnist_dir};
use cbln::experiment::{ExperimentConfig, ExperimentKind};

/// Data root, resolved against the workspace when relative, since tests run
/// from the crate directory.
pub fn root() -> PathBuf {
    let r = data_root();
    if r.is_absolute() {
        r
    } else {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(r)
    }
}

pub fn mnist_available() -> bool {
    let ok = mnist_dir(&root()).join("train-images-idx3-ubyte").exists();
    if !ok {
        eprintln!("MNIST not found under {}; skipping", root().display());
    }
    ok
}

/// Small generated Two Patterns run that needs no files.
pub fn tiny_ucr(n_tasks: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(ExperimentKind::SplitUcr, n_tasks);
    c.data_dir = Some(PathBuf::from("/nonexistent-cbln-data"));
    c.hidden = Some(vec![16]);
    c.train.epochs = 3;
    c.probe_size = 40;
    c.mc_samples = 20;
    c.predict_samples = 4;
    c.trials = 2;
    c.subsample = Some(0.5);
    c
}
