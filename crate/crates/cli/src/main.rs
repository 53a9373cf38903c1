//! `mrglmm`: fit, tune, simulate and benchmark matrix-response
//! generalized linear mixed models for longitudinal network data.
//!
//! Exit codes: 0 success, 1 invalid input, 2 non-convergence (outputs
//! still written), 3 internal numerical failure.

mod commands;
mod config;
mod dataio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Overrides;
use crate::config::ModeSpec;
use crate::dataio::CliError;

#[derive(Parser)]
#[command(
    name = "mrglmm",
    version,
    about = "Matrix-response generalized linear mixed models for longitudinal networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to MRGLMM_THREADS, then hardware
    /// parallelism). Results never depend on this value.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Regenerate outputs even when they already exist.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Asymmetric,
    SymmetricRefine,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (+ generating truth) to disk.
    Simulate(CommonArgs),
    /// Fit the model to a dataset directory.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the config's intercept mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Two-stage EBIC rank/sparsity selection.
    Tune(CommonArgs),
    /// Replicated synthetic benchmark with mean(sd) summary tables.
    Replicate(CommonArgs),
    /// Compare fitted parameters against generating truth.
    Eval(CommonArgs),
}

fn resolve_threads(flag: Option<usize>) -> usize {
    let requested = flag.or_else(|| {
        std::env::var("MRGLMM_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(t) = requested {
        let t = t.max(1);
        // Ignore the error if a pool already exists (tests call run()
        // repeatedly in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        t
    } else {
        rayon::current_num_threads()
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let (common, mode, runner): (
        &CommonArgs,
        Option<ModeSpec>,
        fn(&std::path::Path, &Overrides) -> Result<i32, CliError>,
    ) = match &cli.command {
        Command::Simulate(c) => (c, None, commands::cmd_simulate),
        Command::Fit { common, mode } => (
            common,
            mode.map(|m| match m {
                ModeArg::Asymmetric => ModeSpec::Asymmetric,
                ModeArg::SymmetricRefine => ModeSpec::SymmetricRefine,
            }),
            commands::cmd_fit,
        ),
        Command::Tune(c) => (c, None, commands::cmd_tune),
        Command::Replicate(c) => (c, None, commands::cmd_replicate),
        Command::Eval(c) => (c, None, commands::cmd_eval),
    };
    let threads = resolve_threads(common.threads);
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        force: common.force,
        mode,
        threads,
    };
    runner(&common.config, &overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code as u8)
        }
    }
}
