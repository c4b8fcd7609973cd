//! `mdmt`: train and evaluate multi-domain multi-task models.
//!
//! Exit codes:
//!
//! * `0`: success
//! * `1`: invalid input or configuration
//! * `2`: training hit a non-finite number
//!
//! Failures print one JSON object to stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "mdmt", version, about = "Multi-domain multi-task mixture-of-experts recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the configured variant and write its run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Parent directory of the run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Training seed (overrides train.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split of the configured data.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Checkpoint whose report is the relative-improvement baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several variants under several seeds and tabulate test AUC.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Overrides ablate.variants.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Seed sweep of the configured variant, optionally over a grid of config values.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Grid axis `KEY=V1,V2,...`; repeatable, the grid is their product.
        #[arg(long = "grid", value_name = "KEY=VALUES")]
        grid: Vec<String>,
    },
    /// Generate the configured synthetic dataset into a cache file.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Generation seed (overrides synth.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every backward rule and of whole models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one primitive's backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write per-sample intermediate representations as tab-separated text.
    ExportEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// domain_module, task_module or fused.
        #[arg(long, default_value = "fused")]
        stage: String,
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert raw MovieLens-1M files into the interaction CSV format.
    PrepareMovielens {
        /// Directory holding the MovieLens-1M `.dat` files.
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { cfg, out, seed } => commands::train(&cfg, &out, seed),
        Command::Eval {
            cfg,
            checkpoint,
            split,
            baseline,
            out,
        } => commands::eval(&cfg, &checkpoint, &split, baseline.as_deref(), out.as_deref()),
        Command::Ablate { cfg, out, seeds, variants } => commands::ablate(&cfg, &out, &seeds, variants.as_deref()),
        Command::Sweep { cfg, out, seeds, grid } => commands::sweep(&cfg, &out, &seeds, &grid),
        Command::Synth { cfg, out, seed } => commands::synth(&cfg, &out, seed),
        Command::Gradcheck { seed, inject_fault } => commands::gradcheck(seed, inject_fault.as_deref()),
        Command::ExportEmbeddings {
            cfg,
            checkpoint,
            stage,
            task,
            split,
            out,
        } => commands::export_embeddings(&cfg, &checkpoint, &stage, task, &split, &out),
        Command::PrepareMovielens { raw, out } => commands::prepare_movielens(&raw, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return CliError::Usage(e.to_string()).report(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
