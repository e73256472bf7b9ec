// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use clap::Parser;
use std::path::PathBuf;
use std::process::ExitCode;

mod config;
mod modes;

use config::Mode;

pub const PROGRAM: &str = "selftrain";

#[derive(Debug, Parser)]
#[command(name = "selftrain", version, about = "Self-training on Gaussian mixtures: replica theory and finite-size runs")]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
    /// JSON run configuration, or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `scenario.lambda_u=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed; replaces `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

/// How a run ended. The discriminant is the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Io = 1,
    Invalid = 2,
    Numerical = 3,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(Status::Invalid as u8);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global pool is configured once");
    }
    let cfg = match config::resolve(cli.config.as_deref(), &cli.overrides, cli.mode, cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid configuration: {e}");
            return ExitCode::from(Status::Invalid as u8);
        }
    };
    let status = modes::run(&cfg, &cli.out, &cli.overrides);
    ExitCode::from(status as u8)
}
