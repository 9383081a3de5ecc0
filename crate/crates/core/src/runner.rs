//! Experiment orchestration: data preparation, resumable training with
//! per-epoch persistence, evaluation and report emission.
//!
//! Files in the output directory:
//!
//! | file | content |
//! |---|---|
//! | `STATUS` | `running`, `complete`, or `failed: <reason>` |
//! | `config.json` | the resolved config |
//! | `metrics.jsonl` | one record per finished epoch |
//! | `checkpoint.atnt`, `best.atnt` | current and early-stopped weights |
//! | `state.json` | trainer bookkeeping for resume |
//! | `final.atnt` | weights after the last epoch |
//! | `report.csv` | evaluation of `best.atnt`; only written on success |
//! | `decision_regions.svg` | 2D datasets only |
//!
//! Every file is replaced atomically, and `report.csv` is deleted when a
//! run starts, so a crash never leaves a stale or partial report behind.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DatasetSpec, ExperimentConfig};
use crate::data::{self, Dataset};
use crate::defenses::{self, EpochMetrics, TrainerState};
use crate::error::{AtentError, Result};
use crate::models::{self, ModelParams};
use crate::report::{self, write_atomic, EvalReport, ReportRow};
use crate::sampler::NormKind;
use crate::smoothing;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `$ATENT_DATA_DIR` when the config names no directory.
    pub data_dir: Option<PathBuf>,
    /// Continue from `state.json` if present.
    pub resume: bool,
    /// Stop (with [`AtentError::Interrupted`]) once this many epochs are done.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

const TEST_STREAM: u64 = 0x7E57;

/// Builds the train/validation/test splits named by the config.
pub fn load_splits(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<Splits> {
    let (train_full, test) = match &cfg.dataset {
        DatasetSpec::MnistBinary {
            classes,
            train_per_class,
            test_samples,
            dir,
        } => {
            // an explicit flag overrides the config
            let dir = match (data_dir, dir) {
                (Some(flag), _) => flag.to_path_buf(),
                (None, Some(d)) => d.clone(),
                (None, None) => data::data_dir(None),
            };
            let (train, test) = data::load_mnist_dir(&dir)?;
            let train = data::subset_binary(&train, classes[0], classes[1], *train_per_class, cfg.seed)?;
            let test = data::subset_binary(&test, classes[0], classes[1], usize::MAX, cfg.seed)?;
            let test = match test_samples {
                Some(n) => test.head(*n),
                None => test,
            };
            (train, test)
        }
        DatasetSpec::TwoGaussians {
            n_train,
            n_test,
            separation,
        } => (
            data::synth_two_gaussians(*n_train, *separation, cfg.seed)?,
            data::synth_two_gaussians(*n_test, *separation, cfg.seed ^ TEST_STREAM)?,
        ),
    };
    let (train, val) = data::train_val_split(&train_full)?;
    Ok(Splits { train, val, test })
}

fn norm_name(norm: NormKind) -> &'static str {
    match norm {
        NormKind::L2 => "l2",
        NormKind::Linf => "linf",
    }
}

/// Attack settings with the experiment's master seed folded in.
pub fn seeded_attack(cfg: &ExperimentConfig, attack: &AttackConfig) -> AttackConfig {
    AttackConfig {
        seed: attack.seed.wrapping_add(cfg.seed),
        ..attack.clone()
    }
}

/// Natural accuracy as an `attack = none` row, then one row per configured
/// attack and a `smoothing` row (ε holds σ) when smoothing is configured.
pub fn evaluate(cfg: &ExperimentConfig, params: &ModelParams, test: &Dataset) -> Result<EvalReport> {
    let timed = cfg.trainer.record_wall_time;
    let elapsed = |t: Instant| if timed { t.elapsed().as_millis() as u64 } else { 0 };
    let defense = cfg.trainer.defense.as_str().to_string();
    let started = Instant::now();
    let natural = models::accuracy(params, &test.inputs, &test.labels)?;
    let mut rows = vec![ReportRow {
        defense: defense.clone(),
        attack: "none".into(),
        norm: "none".into(),
        epsilon: 0.0,
        natural_acc: natural,
        robust_acc: natural,
        seed: cfg.seed,
        wall_ms: elapsed(started),
    }];
    for a in &cfg.attacks {
        let started = Instant::now();
        let a = seeded_attack(cfg, a);
        let robust = attacks::robust_accuracy(params, test, &a)?;
        rows.push(ReportRow {
            defense: defense.clone(),
            attack: a.kind.as_str().into(),
            norm: norm_name(a.norm).into(),
            epsilon: a.radius,
            natural_acc: natural,
            robust_acc: robust,
            seed: cfg.seed,
            wall_ms: elapsed(started),
        });
    }
    if let Some(s) = &cfg.smoothing {
        let started = Instant::now();
        let s = smoothing::SmoothingConfig {
            seed: s.seed.wrapping_add(cfg.seed),
            ..s.clone()
        };
        let acc = smoothing::smooth_accuracy(params, test, &s, true)?;
        rows.push(ReportRow {
            defense,
            attack: "smoothing".into(),
            norm: "l2".into(),
            epsilon: s.sigma,
            natural_acc: natural,
            robust_acc: acc,
            seed: cfg.seed,
            wall_ms: elapsed(started),
        });
    }
    Ok(EvalReport { rows })
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AtentError::Locked(path)),
            Err(e) => Err(AtentError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Trainer bookkeeping persisted next to the checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedState {
    config: ExperimentConfig,
    epoch: usize,
    best_metric: Option<f64>,
    best_tiebreak: Option<f64>,
    best_epoch: Option<usize>,
    stale_epochs: usize,
    history: Vec<EpochMetrics>,
}

fn metrics_jsonl(history: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in history {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

fn persist(cfg: &ExperimentConfig, state: &TrainerState, out: &Path) -> Result<()> {
    save_checkpoint(&state.params, &out.join("checkpoint.atnt"))?;
    save_checkpoint(&state.best_params, &out.join("best.atnt"))?;
    write_atomic(&out.join("metrics.jsonl"), metrics_jsonl(&state.history)?.as_bytes())?;
    let saved = SavedState {
        config: cfg.clone(),
        epoch: state.epoch,
        best_metric: state.best_metric,
        best_tiebreak: state.best_tiebreak,
        best_epoch: state.best_epoch,
        stale_epochs: state.stale_epochs,
        history: state.history.clone(),
    };
    // state.json last: it only ever points at checkpoints already on disk
    write_atomic(&out.join("state.json"), serde_json::to_string_pretty(&saved)?.as_bytes())
}

fn restore(cfg: &ExperimentConfig, out: &Path) -> Result<Option<TrainerState>> {
    let path = out.join("state.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| AtentError::io(&path, e))?;
    let saved: SavedState = serde_json::from_str(&text)?;
    if &saved.config != cfg {
        return Err(AtentError::Config(format!(
            "{} was written by a different config; refusing to resume",
            path.display()
        )));
    }
    Ok(Some(TrainerState {
        params: load_checkpoint(&out.join("checkpoint.atnt"))?,
        best_params: load_checkpoint(&out.join("best.atnt"))?,
        epoch: saved.epoch,
        best_metric: saved.best_metric,
        best_tiebreak: saved.best_tiebreak,
        best_epoch: saved.best_epoch,
        stale_epochs: saved.stale_epochs,
        history: saved.history,
    }))
}

fn set_status(out: &Path, status: &str) -> Result<()> {
    write_atomic(&out.join("STATUS"), format!("{status}\n").as_bytes())
}

/// Trains (or resumes), evaluates the early-stopped weights on the test
/// split and writes every artifact into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EvalReport> {
    cfg.validate()?;
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| AtentError::io(out, e))?;
    let _lock = DirLock::acquire(out)?;
    let report_path = out.join("report.csv");
    if report_path.exists() {
        std::fs::remove_file(&report_path).map_err(|e| AtentError::io(&report_path, e))?;
    }
    set_status(out, "running")?;
    let result = run_locked(cfg, opts, out);
    match &result {
        Ok(_) => set_status(out, "complete")?,
        Err(e) => {
            let _ = set_status(out, &format!("failed: {e}"));
        }
    }
    result
}

fn run_locked(cfg: &ExperimentConfig, opts: &RunOptions, out: &Path) -> Result<EvalReport> {
    write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())?;
    let splits = load_splits(cfg, opts.data_dir.as_deref())?;
    let trainer = cfg.trainer();
    let state = match opts.resume.then(|| restore(cfg, out)).transpose()?.flatten() {
        Some(s) => s,
        None => TrainerState::new(ModelParams::init(cfg.model.clone(), cfg.seed)?),
    };
    let mut interrupted = false;
    let state = defenses::train_from(&trainer, state, &splits.train, &splits.val, |s| {
        persist(cfg, s, out)?;
        let stop = opts.stop_after_epochs.is_some_and(|n| s.epoch >= n) && s.epoch < trainer.epochs;
        interrupted = stop;
        Ok(!stop)
    })?;
    if interrupted {
        return Err(AtentError::Interrupted { epoch: state.epoch });
    }
    persist(cfg, &state, out)?;
    save_checkpoint(&state.params, &out.join("final.atnt"))?;
    let report = evaluate(cfg, &state.best_params, &splits.test)?;
    if cfg.dataset.is_2d() {
        let svg = report::decision_region_svg(&state.best_params, &splits.test)?;
        write_atomic(&out.join("decision_regions.svg"), svg.as_bytes())?;
    }
    report::emit_report(&report, out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn toy(dir: &Path) -> ExperimentConfig {
        let text = format!(
            r#"{{
                "name": "toy",
                "dataset": {{"kind": "two_gaussians", "n_train": 60, "n_test": 40, "separation": 4.0}},
                "model": {{"kind": "mlp", "widths": [2, 8, 2]}},
                "trainer": {{"defense": "sgd", "lr": 0.2, "epochs": 3, "batch_size": 10,
                             "early_stop": {{"metric": "natural"}}}},
                "attacks": [{{"kind": "pgd", "norm": "linf", "radius": 0.0, "steps": 3}}],
                "output_dir": {:?},
                "seed": 4
            }}"#,
            dir.to_str().unwrap()
        );
        parse_config_str(&text).unwrap()
    }

    #[test]
    fn zero_radius_row_equals_natural() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&toy(dir.path()), &RunOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[1].robust_acc, report.rows[0].natural_acc);
        assert!(dir.path().join("decision_regions.svg").exists());
        assert_eq!(std::fs::read_to_string(dir.path().join("STATUS")).unwrap(), "complete\n");
        assert!(!dir.path().join(".lock").exists());
    }

    #[test]
    fn lock_blocks_a_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let _held = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            run_experiment(&toy(dir.path()), &RunOptions::default()),
            Err(AtentError::Locked(_))
        ));
    }

    #[test]
    fn interrupted_run_has_no_report() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            stop_after_epochs: Some(1),
            ..RunOptions::default()
        };
        let err = run_experiment(&toy(dir.path()), &opts).unwrap_err();
        assert!(matches!(err, AtentError::Interrupted { epoch: 1 }));
        assert!(!dir.path().join("report.csv").exists());
        let status = std::fs::read_to_string(dir.path().join("STATUS")).unwrap();
        assert!(status.starts_with("failed"));
    }
}
