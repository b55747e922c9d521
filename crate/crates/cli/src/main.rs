//! `quantsweep` — forward-pass-only quantization sensitivity analysis for
//! toy SSM / hybrid SSM–attention language models.
//!
//! Four subcommands over one TOML config:
//!
//! * `sweep`    — per-layer sensitivity records + rank-agreement stats;
//! * `plan`     — mixed-precision plan families + the size/PPL pareto table;
//! * `ablate`   — aggregate views (per-subtype means, per-block shares);
//! * `selftest` — executable checks of the identities the analysis rests on.
//!
//! Runs are pure functions of the config file and the CLI overrides: given
//! the same inputs, every output file is byte-identical, regardless of
//! `--threads`.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "quantsweep",
    version,
    about = "Gradient-free quantization sensitivity analysis for toy SSM/hybrid LMs"
)]
struct Cli {
    /// Run configuration (TOML). Omit to use built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (overrides the config's `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Size of the rayon thread pool (default: one thread per core).
    /// Results are bit-identical at any setting.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Model seed (overrides the config's `model.seed`).
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer sensitivity sweep: records.csv + correlations.csv per width.
    Sweep,
    /// Plan families (p*.json, m*.json) and the pareto.csv frontier table.
    Plan,
    /// Aggregate ablation tables: subtype_avg.csv + layer_cumulative.csv.
    Ablate,
    /// Run the built-in mathematical identity checks.
    Selftest,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the global thread pool")?;
    }

    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        config.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        config.model.seed = seed;
    }

    match cli.command {
        Command::Sweep => commands::cmd_sweep(config),
        Command::Plan => commands::cmd_plan(config),
        Command::Ablate => commands::cmd_ablate(config),
        Command::Selftest => commands::cmd_selftest(),
    }
}
