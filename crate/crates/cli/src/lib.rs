//! Command-line experiments for the deep penalty method: training runs,
//! finite-difference benchmarks, dimension sweeps, loss comparisons and
//! consolidated reports, all driven by TOML configuration files.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};

/// Environment variable naming the output directory used when neither
/// `--out` nor `output.directory` is given.
pub const OUT_DIR_ENV: &str = "DPM_OUT_DIR";

/// Output directory used when nothing else is configured.
pub const DEFAULT_OUT_DIR: &str = "dpm-out";

#[derive(Debug, Parser)]
#[command(name = "dpm", version, about = "Deep penalty method experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write metrics, summary and checkpoint.
    Train(RunArgs),
    /// Solve the reduced problem by finite differences with diagnostics.
    Benchmark(RunArgs),
    /// Train every dimension in `sweep.dims` and write a report.
    Sweep(RunArgs),
    /// Paired L1 and MSE runs on common random numbers.
    CompareLoss(RunArgs),
    /// Consolidate completed runs into one CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.directory` and the environment.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for network initialization and path streams.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Configuration whose output directory holds the runs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding the runs; the report is written here too.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for symmetry with the other commands; unused.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Additional run directories (default: the output directory).
    pub runs: Vec<PathBuf>,
}

/// `--out`, then `output.directory`, then `$DPM_OUT_DIR`, then `dpm-out`.
pub fn resolve_out_dir(cli_out: Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli_out
        .or_else(|| cfg.and_then(|c| c.output.directory.clone()))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Report(args) => {
            let cfg = args.config.as_deref().map(ExperimentConfig::load).transpose()?;
            let out = resolve_out_dir(args.out, cfg.as_ref());
            let roots = if args.runs.is_empty() { vec![out.clone()] } else { args.runs };
            commands::cmd_report(&roots, &out).map(|_| ())
        }
        Command::Train(a) => with_config(a, |cfg, out| commands::cmd_train(cfg, out).map(|_| ())),
        Command::Benchmark(a) => with_config(a, |cfg, out| commands::cmd_benchmark(cfg, out).map(|_| ())),
        Command::Sweep(a) => with_config(a, |cfg, out| commands::cmd_sweep(cfg, out).map(|_| ())),
        Command::CompareLoss(a) => with_config(a, |cfg, out| commands::cmd_compare_loss(cfg, out).map(|_| ())),
    }
}

fn with_config(
    args: RunArgs,
    f: impl FnOnce(&ExperimentConfig, &std::path::Path) -> CliResult<()>,
) -> CliResult<()> {
    let cfg = ExperimentConfig::load(&args.config)?.with_seed(args.seed);
    let out = resolve_out_dir(args.out, Some(&cfg));
    f(&cfg, &out)
}
