//! End-to-end runs: determinism, resume and the command line.

use std::path::Path;
use std::process::Command;

use atent::checkpoint::{load_checkpoint, save_checkpoint};
use atent::config::{parse_config_str, ExperimentConfig};
use atent::error::AtentError;
use atent::runner::{run_experiment, RunOptions};

fn small(out: &Path) -> ExperimentConfig {
    let text = r#"{
        "name": "small",
        "dataset": {"kind": "two_gaussians", "n_train": 200, "n_test": 100, "separation": 3.0},
        "model": {"kind": "mlp", "widths": [2, 8, 2]},
        "trainer": {
            "defense": "atent_l2", "lr": 0.1, "epochs": 4, "batch_size": 20,
            "sampler": {"gamma": 200.0, "step": 0.002, "steps": 3, "noise_scale": 0.01, "ema": 0.9, "norm": "l2"},
            "early_stop": {"eval_attack": {"kind": "pgd", "norm": "l2", "radius": 0.05, "steps": 5, "random_start": true}}
        },
        "attacks": [
            {"kind": "pgd", "norm": "l2", "radius": 0.05, "steps": 5, "restarts": 2, "random_start": true},
            {"kind": "fgsm", "norm": "linf", "radius": 0.05}
        ],
        "smoothing": {"sigma": 0.05, "n_samples": 50},
        "output_dir": "unused",
        "seed": 3
    }"#;
    ExperimentConfig {
        output_dir: out.to_path_buf(),
        ..parse_config_str(text).unwrap()
    }
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    std::fs::read(dir.join(file)).unwrap()
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&small(&a), &RunOptions::default()).unwrap();
    run_experiment(&small(&b), &RunOptions::default()).unwrap();
    for f in ["report.csv", "metrics.jsonl", "best.atnt", "final.atnt", "decision_regions.svg"] {
        assert!(read(&a, f) == read(&b, f), "{f} differs");
    }
    assert!(String::from_utf8(read(&a, "STATUS")).unwrap().starts_with("complete"));
    let text = String::from_utf8(read(&a, "report.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    run_experiment(&small(&full), &RunOptions::default()).unwrap();
    let stop = RunOptions {
        stop_after_epochs: Some(2),
        ..RunOptions::default()
    };
    match run_experiment(&small(&split), &stop) {
        Err(AtentError::Interrupted { epoch: 2 }) => {}
        other => panic!("expected an interruption, got {other:?}"),
    }
    assert!(!split.join("report.csv").exists());
    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    run_experiment(&small(&split), &resume).unwrap();
    for f in ["report.csv", "metrics.jsonl", "best.atnt", "final.atnt"] {
        assert!(read(&full, f) == read(&split, f), "{f} differs");
    }
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&small(tmp.path()), &RunOptions::default()).unwrap();
    let p = load_checkpoint(&tmp.path().join("best.atnt")).unwrap();
    let again = tmp.path().join("copy.atnt");
    save_checkpoint(&p, &again).unwrap();
    assert!(read(tmp.path(), "best.atnt") == read(tmp.path(), "copy.atnt"));
    assert!(load_checkpoint(&again).unwrap().bit_eq(&p));
}

#[test]
fn resume_refuses_a_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let stop = RunOptions {
        stop_after_epochs: Some(1),
        ..RunOptions::default()
    };
    assert!(run_experiment(&small(tmp.path()), &stop).is_err());
    let mut changed = small(tmp.path());
    changed.trainer.lr = 0.2;
    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    assert!(run_experiment(&changed, &resume).is_err());
}

fn atent(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_atent")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("small.json");
    std::fs::write(&cfg_path, small(&tmp.path().join("run")).to_json()).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    assert_eq!(atent(&["--help"]).0, 0);
    assert_eq!(atent(&["frobnicate"]).0, 1);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, std::fs::read_to_string(&cfg_path).unwrap().replace("\"lr\"", "\"rate\"")).unwrap();
    let (code, _, err) = atent(&["train", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("rate"), "{err}");

    let (code, _, _) = atent(&["evaluate", cfg]);
    assert_eq!(code, 2, "no checkpoint yet");

    let (code, out, _) = atent(&["train", cfg]);
    assert_eq!(code, 0);
    assert!(out.contains("atent_l2"));
    let (code, out, _) = atent(&["evaluate", cfg]);
    assert_eq!(code, 0);
    assert!(out.contains("test") && out.contains("natural_acc"));
    let (code, out, _) = atent(&["report", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 5);

    let (code, out, _) = atent(&["verify", "--suite", "lemma1"]);
    assert_eq!(code, 0);
    assert!(out.lines().all(|l| l.starts_with("PASS")));
}
