use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use fop_core::harness::{
    bench_csv, run_analyze, run_bench, run_sweep, run_toy, run_train, sweep_csv, BenchConfig, SweepConfig,
    ToyConfig, TrainJob,
};
use fop_core::record::write_atomic;
use fop_core::{FopError, RunRecord};

const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CONFIG: u8 = 4;

/// Learned first-order preconditioning experiments.
#[derive(Parser, Debug)]
#[command(name = "fop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one optimizer on a 2-D toy problem and write its run record.
    Toy(RunArgs),
    /// Tune and compare optimizers on a toy problem; writes a CSV table.
    Bench(RunArgs),
    /// Train the MLP and write its run record.
    Train(RunArgs),
    /// Run an lr × (momentum or hyper-lr) × seed grid; writes a CSV table.
    Sweep(RunArgs),
    /// Write spectrum.csv, angles.csv and norms.csv for a run record.
    Analyze {
        /// Run record produced by `toy` or `train`.
        run: PathBuf,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration (for sweeps: runs this single seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for bench and sweep cells (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Overrides the preconditioner snapshot interval (toy and train; 0 disables).
    #[arg(long)]
    snapshot_every: Option<u64>,
}

/// A problem with the invocation itself rather than with the run.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Toy(args) => {
            let mut cfg: ToyConfig = load_config(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(s) = args.snapshot_every {
                cfg.snapshot_every = s;
            }
            let rec = run_toy(&cfg)?;
            emit(args.out.as_deref(), &rec.to_text())?;
            let s = &rec.summary;
            eprintln!(
                "{:?}: {} after {} iterations, f = {:e}, |grad| = {:e}",
                cfg.problem,
                if s.converged { "converged" } else if s.diverged { "diverged" } else { "not converged" },
                s.iterations,
                s.final_loss,
                s.final_grad_norm
            );
            Ok(if s.diverged {
                EXIT_DIVERGED
            } else if s.converged {
                0
            } else {
                EXIT_NOT_CONVERGED
            })
        }
        Command::Bench(args) => {
            let mut cfg: BenchConfig = load_config(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let rows = run_bench(&cfg, args.jobs)?;
            emit(args.out.as_deref(), &bench_csv(&rows))?;
            Ok(0)
        }
        Command::Train(args) => {
            let mut job: TrainJob = load_config(&args.config)?;
            if let Some(seed) = args.seed {
                job.train.seed = seed;
            }
            if let Some(s) = args.snapshot_every {
                job.train.snapshot_every = s;
            }
            let rec = run_train(&job)?;
            emit(args.out.as_deref(), &rec.to_text())?;
            let s = &rec.summary;
            match s.final_accuracy {
                Some(acc) => eprintln!("trained {} steps, test accuracy {acc:.4}", s.iterations),
                None => eprintln!("training stopped: {}", s.failure.as_deref().unwrap_or("unknown reason")),
            }
            Ok(if s.diverged { EXIT_DIVERGED } else { 0 })
        }
        Command::Sweep(args) => {
            let mut cfg: SweepConfig = load_config(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seeds = vec![seed];
            }
            let result = run_sweep(&cfg, args.jobs)?;
            emit(args.out.as_deref(), &sweep_csv(&result))?;
            Ok(0)
        }
        Command::Analyze { run, out, jobs } => {
            let rec = RunRecord::read(&run).with_context(|| format!("reading {}", run.display()))?;
            let res = run_analyze(&rec, &out, jobs)?;
            eprintln!(
                "wrote spectrum.csv, angles.csv and norms.csv to {} ({} norm-bound violations)",
                out.display(),
                res.norm_violations
            );
            Ok(0)
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<ConfigError>().is_some() {
        return true;
    }
    matches!(
        e.downcast_ref::<FopError>(),
        Some(
            FopError::Config(_)
                | FopError::UnsupportedVersion { .. }
                | FopError::MissingSnapshots { .. }
                | FopError::Record(_)
        )
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { 1 })
        }
    }
}
