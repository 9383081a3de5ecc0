//! `atent` command line: train, attack, evaluate, smooth-eval, verify and
//! report.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
//! 3 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atent::config::{parse_config, ExperimentConfig};
use atent::error::AtentError;
use atent::report::{self, EvalReport};
use atent::runner::{self, RunOptions};
use atent::smoothing::SmoothingConfig;
use atent::{checkpoint, models, smoothing, verify, ModelParams};

#[derive(Parser)]
#[command(name = "atent", version, about = "Entropic adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config, then evaluate and write the report.
    Train {
        config: PathBuf,
        /// MNIST directory (overrides the config; default $ATENT_DATA_DIR, then ./data).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Continue an interrupted run from its saved state.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are complete (resumable).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run the configured attacks against a checkpoint.
    Attack {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Report directory (default: <output_dir>/attack).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Natural accuracy of a checkpoint on every split.
    Evaluate {
        config: PathBuf,
        /// Default: <output_dir>/best.atnt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Randomized-smoothing accuracy of a checkpoint on the test split.
    SmoothEval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Overrides the config's smoothing sigma.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Drop abstentions from the denominator instead of counting them wrong.
        #[arg(long)]
        ignore_abstain: bool,
    },
    /// Numerical verification suites.
    Verify {
        #[arg(long, default_value = "all", value_parser = ["gradients", "sampler", "lemma1", "all"])]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write sampler histogram SVGs into this directory.
        #[arg(long)]
        plots: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Print a run's report as a table.
    Report {
        /// Run directory or report CSV.
        path: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(AtentError),
    Verification,
}

impl From<AtentError> for Failure {
    fn from(e: AtentError) -> Self {
        match e {
            AtentError::Config(_) | AtentError::Json(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    parse_config(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_params(cfg: &ExperimentConfig, path: Option<PathBuf>) -> Result<ModelParams, Failure> {
    let path = path.unwrap_or_else(|| cfg.output_dir.join("best.atnt"));
    let params = checkpoint::load_checkpoint(&path)?;
    if params.arch() != &cfg.model {
        return Err(Failure::Usage(format!(
            "{} holds a different architecture than the config",
            path.display()
        )));
    }
    Ok(params)
}

fn print_table(report: &EvalReport) {
    println!(
        "{:<12} {:<14} {:<5} {:>8} {:>8} {:>8} {:>6} {:>8}",
        "defense", "attack", "norm", "epsilon", "natural", "robust", "seed", "wall_ms"
    );
    for r in &report.rows {
        println!(
            "{:<12} {:<14} {:<5} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>8}",
            r.defense, r.attack, r.norm, r.epsilon, r.natural_acc, r.robust_acc, r.seed, r.wall_ms
        );
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            data_dir,
            resume,
            stop_after,
        } => {
            let cfg = load_config(&config)?;
            let opts = RunOptions {
                data_dir,
                resume,
                stop_after_epochs: stop_after,
            };
            let report = runner::run_experiment(&cfg, &opts)?;
            print_table(&report);
        }
        Command::Attack {
            config,
            checkpoint,
            data_dir,
            out,
        } => {
            let cfg = load_config(&config)?;
            let params = load_params(&cfg, Some(checkpoint))?;
            let splits = runner::load_splits(&cfg, data_dir.as_deref())?;
            let cfg = ExperimentConfig { smoothing: None, ..cfg };
            let report = runner::evaluate(&cfg, &params, &splits.test)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("attack"));
            let path = report::emit_report(&report, &dir)?;
            print_table(&report);
            eprintln!("wrote {}", path.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            data_dir,
        } => {
            let cfg = load_config(&config)?;
            let params = load_params(&cfg, checkpoint)?;
            let s = runner::load_splits(&cfg, data_dir.as_deref())?;
            for (name, ds) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
                let acc = models::accuracy(&params, &ds.inputs, &ds.labels)?;
                println!("{name:<6} n={:<6} natural_acc={acc:.4}", ds.len());
            }
        }
        Command::SmoothEval {
            config,
            checkpoint,
            data_dir,
            sigma,
            n_samples,
            ignore_abstain,
        } => {
            let cfg = load_config(&config)?;
            let params = load_params(&cfg, checkpoint)?;
            let base = cfg.smoothing.clone().unwrap_or(SmoothingConfig {
                sigma: 0.12,
                n_samples: 100,
                abstain_margin: 0.0,
                seed: 0,
            });
            let scfg = SmoothingConfig {
                sigma: sigma.unwrap_or(base.sigma),
                n_samples: n_samples.unwrap_or(base.n_samples),
                seed: base.seed.wrapping_add(cfg.seed),
                ..base
            };
            scfg.validate()?;
            let s = runner::load_splits(&cfg, data_dir.as_deref())?;
            let acc = smoothing::smooth_accuracy(&params, &s.test, &scfg, !ignore_abstain)?;
            println!(
                "sigma={} n_samples={} smoothed_acc={acc:.4}",
                scfg.sigma, scfg.n_samples
            );
        }
        Command::Verify {
            suite,
            seed,
            plots,
            json,
        } => {
            let reports = verify::run_suites(&suite, seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports).map_err(AtentError::from)?);
            } else {
                for r in &reports {
                    for c in &r.checks {
                        let verdict = if c.passed { "PASS" } else { "FAIL" };
                        println!("{verdict} {}/{}: {}", r.suite, c.name, c.detail);
                    }
                }
            }
            if let Some(dir) = plots {
                std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(AtentError::Data(format!("{}: {e}", dir.display()))))?;
                for (file, svg) in verify::sampler_plots(seed)? {
                    report::write_atomic(&dir.join(file), svg.as_bytes())?;
                }
            }
            if !reports.iter().all(|r| r.passed()) {
                return Err(Failure::Verification);
            }
        }
        Command::Report { path } => {
            let path = if path.is_dir() { path.join("report.csv") } else { path };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Failure::Runtime(AtentError::Data(format!("{}: {e}", path.display()))))?;
            print_table(&EvalReport::from_csv(&text)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Verification) => {
            eprintln!("verification failed");
            ExitCode::from(3)
        }
    }
}
