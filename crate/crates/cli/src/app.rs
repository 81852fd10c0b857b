//! Command-line surface of the `blo` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, ExperimentConfig};
use crate::exit;
use crate::runner::{check_config, exit_code, run_experiments, RunnerOptions, CHECK_STEP, CHECK_TOL};
use crate::studies::{reproduce, IdxPaths, Study, StudyOptions};

/// Environment variable overriding the seed of every run.
pub const SEED_ENV: &str = "BLO_SEED";

#[derive(Debug, Parser)]
#[command(name = "blo", version, about = "Bilevel optimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every experiment of a JSON config (sweeps expanded).
    Run {
        config: PathBuf,
        /// Maximum number of runs executing at once.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Output root, overriding the configs' `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a pre-baked comparison study.
    Reproduce(ReproduceArgs),
    /// Finite-difference check of every problem's derivatives.
    Check { config: PathBuf },
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// counterexample | eta-sweep | ll-accuracy | dimension-scaling | multimin | hypercleaning
    pub study: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = crate::runner::DEFAULT_OUTPUT)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// IDX image file with training (and, without --idx-val, validation) samples.
    #[arg(long, requires = "idx_labels")]
    pub idx_train: Option<PathBuf>,
    #[arg(long, requires = "idx_train")]
    pub idx_labels: Option<PathBuf>,
    /// Separate IDX validation images.
    #[arg(long, requires_all = ["idx_val_labels", "idx_train"])]
    pub idx_val: Option<PathBuf>,
    #[arg(long, requires = "idx_val")]
    pub idx_val_labels: Option<PathBuf>,
}

/// Reads the seed override, if any.
pub fn seed_override(value: Option<&str>) -> Result<Option<u64>, String> {
    value.map(|v| v.trim().parse::<u64>().map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer"))).transpose()
}

fn load(path: &std::path::Path, seed: Option<u64>) -> Result<Vec<ExperimentConfig>, i32> {
    match load_config(path) {
        Ok(mut cfgs) => {
            if let Some(s) = seed {
                cfgs.iter_mut().for_each(|c| c.seed = s);
            }
            Ok(cfgs)
        }
        Err(e) => {
            eprintln!("config error: {e}");
            Err(exit::CONFIG_ERROR)
        }
    }
}

/// Executes a parsed command line; `env_seed` is the raw `BLO_SEED` value.
pub fn execute(cli: Cli, env_seed: Option<&str>) -> i32 {
    let seed = match seed_override(env_seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return exit::CONFIG_ERROR;
        }
    };
    match cli.command {
        Command::Run { config, parallel, out } => {
            let cfgs = match load(&config, seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let reports = run_experiments(&cfgs, &RunnerOptions { parallelism: parallel, out, ..Default::default() });
            for r in &reports {
                println!("{}: {} after {} iterations ({})", r.name, r.status.label(), r.summary["iterations"], r.dir.display());
            }
            exit_code(&reports)
        }
        Command::Check { config } => {
            let cfgs = match load(&config, seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let mut ok = true;
            for (i, c) in cfgs.iter().enumerate() {
                let report = check_config(c);
                ok &= report.passed();
                match &report.result {
                    Err(e) => println!("[{i}] {}: cannot build problem: {e}", report.label),
                    Ok(r) => {
                        for check in &r.checks {
                            let verdict = if check.passed { "ok" } else { "FAILED" };
                            println!("[{i}] {} {:<10} rel. error {:.3e} {verdict}", report.label, check.name, check.max_rel_error);
                        }
                    }
                }
            }
            println!("finite differences: step {CHECK_STEP:e}, tolerance {CHECK_TOL:e}");
            if ok {
                exit::SUCCESS
            } else {
                exit::RUN_FAILURE
            }
        }
        Command::Reproduce(args) => {
            let study: Study = match args.study.parse() {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return exit::CONFIG_ERROR;
                }
            };
            let idx = match (args.idx_train, args.idx_labels) {
                (Some(train_images), Some(train_labels)) => {
                    Some(IdxPaths { train_images, train_labels, val: args.idx_val.zip(args.idx_val_labels) })
                }
                _ => None,
            };
            let opts = StudyOptions { seed: args.seed.or(seed).unwrap_or(0), out: args.out, parallelism: args.parallel, idx, ..Default::default() };
            match reproduce(study, &opts) {
                Ok(report) => {
                    for (s, r) in &report.runs {
                        let note = if s.expect_error && r.is_error() { " (expected)" } else { "" };
                        println!("{}: {}{note} after {} iterations", s.series, r.status.label(), r.summary["iterations"]);
                    }
                    for w in &report.warnings {
                        eprintln!("warning: {w}");
                    }
                    println!("results in {}", report.dir.display());
                    report.exit_code()
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit::RUN_FAILURE
                }
            }
        }
    }
}
