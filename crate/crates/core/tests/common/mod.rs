//! Helpers shared by the integration targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use atent::config::{parse_config, DatasetSpec, ExperimentConfig};
use atent::defenses::{self, TrainerState};
use atent::models::ModelParams;
use atent::runner::{self, Splits};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn mnist_dir() -> PathBuf {
    repo_root().join("data/mnist58")
}

/// A shipped config with its data directory pinned to the repository copy
/// and its output redirected to `out`.
pub fn desk_config(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = parse_config(&repo_root().join("configs").join(format!("{name}.json"))).unwrap();
    if let DatasetSpec::MnistBinary { dir, .. } = &mut cfg.dataset {
        *dir = Some(mnist_dir());
    }
    cfg.output_dir = out.to_path_buf();
    cfg
}

pub fn splits(cfg: &ExperimentConfig) -> Splits {
    runner::load_splits(cfg, None).unwrap()
}

/// Trains `cfg` in memory and returns the early-stopped state.
pub fn train(cfg: &ExperimentConfig, s: &Splits) -> TrainerState {
    let init = ModelParams::init(cfg.model.clone(), cfg.seed).unwrap();
    defenses::train(&cfg.trainer(), init, &s.train, &s.val).unwrap()
}
