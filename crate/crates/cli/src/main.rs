use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use rcerm::data::{generate_with, DomainDataset, GenerateConfig};
use rcerm::gradcheck::run_suite;
use rcerm::select::{accuracy, run_sweep, SweepPlan};
use rcerm::train::{load_checkpoint, train_run, TrainConfig};
use rcerm::Error;

#[derive(Parser, Debug)]
#[command(name = "rcerm", version, about = "Contrastive domain-generalization training on synthetic shape domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic four-domain shape dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = GenerateConfig::default().n_per_cell)]
        n_per_cell: usize,
    },
    /// Train one model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: Split,
        /// Test domain; the remaining domains are the training domains.
        #[arg(long, default_value_t = 3)]
        holdout: usize,
        /// Accepted for uniformity; evaluation draws no randomness.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a hyperparameter sweep and write the model-selection report.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Overrides the random-search seed of the plan.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_io_or_format() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

/// Syntax errors are format errors (2); well-formed JSON with bad fields is
/// a config error (1).
fn read_config<T: DeserializeOwned>(path: &Path, flag: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: 2,
        message: format!("{flag} {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code: if e.is_data() { 1 } else { 2 },
        message: format!("{flag} {}: {e}", path.display()),
    })
}

fn load_data(path: &Path) -> Result<DomainDataset, Failure> {
    DomainDataset::load(path).map_err(|e| Failure {
        message: format!("--data: {e}"),
        ..Failure::from(e)
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { seed, out, n_per_cell } => {
            let ds = generate_with(&GenerateConfig {
                seed,
                n_per_cell,
                ..GenerateConfig::default()
            })
            .map_err(|e| Failure {
                message: format!("--n-per-cell: {e}"),
                ..Failure::from(e)
            })?;
            ds.save(&out)?;
            println!(
                "wrote {} classes x {} domains x {} images ({}x{}) to {}",
                ds.classes(),
                ds.domains(),
                ds.n_per_cell(),
                ds.height(),
                ds.width(),
                out.display()
            );
        }
        Command::Train { config, data, out, seed } => {
            let mut cfg: TrainConfig = read_config(&config, "--config")?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = load_data(&data)?;
            let run = train_run(&cfg, &ds, Some(&out))?;
            let f = run.record.final_eval;
            let test = f.acc_test.map_or("-".to_string(), |a| format!("{a:.4}"));
            println!(
                "{} step {}: l_total {:.4}, acc_train {:.4}, acc_val {:.4}, acc_test {test}",
                cfg.algorithm.name(),
                f.step,
                f.l_total,
                f.acc_train,
                f.acc_val
            );
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            holdout,
            seed: _,
        } => {
            let ds = load_data(&data)?;
            if holdout >= ds.domains() {
                return Err(usage(format!(
                    "--holdout {holdout} out of range for {} domains",
                    ds.domains()
                )));
            }
            let bundle = load_checkpoint(&checkpoint)?;
            let part = ds.holdout_partition(holdout)?;
            let refs = match split {
                Split::Train => &part.train_big,
                Split::Val => &part.train_small,
                Split::Test => &part.test,
            };
            println!("{:.6}", accuracy(&bundle, &ds, refs)?);
        }
        Command::Sweep {
            plan,
            data,
            out,
            parallel,
            seed,
        } => {
            let mut p: SweepPlan = read_config(&plan, "--plan")?;
            if let Some(s) = seed {
                match p.random.as_mut() {
                    Some(r) => r.seed = s,
                    None => return Err(usage("--seed needs a plan with a `random` section")),
                }
            }
            if parallel == 0 {
                return Err(usage("--parallel must be at least 1"));
            }
            let ds = load_data(&data)?;
            let result = run_sweep(&p, &ds, Some(&out), parallel)?;
            print!("{}", result.report);
        }
        Command::Gradcheck { tolerance, seed } => {
            if !(tolerance > 0.0) {
                return Err(usage("--tolerance must be positive"));
            }
            let results = run_suite(tolerance, seed)?;
            let mut worst: f64 = 0.0;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{:<4} {:<24} {:.3e}",
                    if r.passed { "ok" } else { "FAIL" },
                    r.name,
                    r.max_rel_err
                );
                worst = worst.max(r.max_rel_err);
                failed += usize::from(!r.passed);
            }
            println!("max rel-err {worst:.3e} over {} checks", results.len());
            if failed > 0 {
                return Err(usage(format!("{failed} gradient checks above {tolerance:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
