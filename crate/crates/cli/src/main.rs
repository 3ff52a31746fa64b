use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::Failure;

/// Visible-infrared matching on synthetic data: data generation, two-stage
/// training, evaluation and gradient checks.
#[derive(Parser, Debug)]
#[command(name = "bit", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, env = "BIT_SEED", global = true)]
    pub seed: Option<u64>,

    /// Report destination; stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file (written to --out).
    GenData,
    /// Train one stage and write a checkpoint to --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON-lines loss log; defaults to the checkpoint path plus `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of coarse candidates rescored per query.
        #[arg(long = "top-K")]
        top_k: Option<usize>,
        /// Rank by cosine of pooled encoder features only.
        #[arg(long)]
        baseline: bool,
    },
    /// Train and evaluate both models on progressively thinned training data.
    Imbalance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2")]
        fractions: Vec<f64>,
        #[arg(long, default_value = "ir")]
        modality: String,
    },
    /// Compare every analytic gradient with central differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Dump the patch matches and scores of one query against the gallery.
    DebugMatches {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Position of the query within the query split.
        #[arg(long, default_value_t = 0)]
        query: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let common = cli.common;
    let result = match cli.command {
        Command::GenData => commands::gen_data(&common),
        Command::Train {
            data,
            stage,
            checkpoint,
            log,
        } => commands::train(&common, &data, stage, checkpoint.as_deref(), log),
        Command::Eval {
            data,
            checkpoint,
            top_k,
            baseline,
        } => commands::eval(&common, &data, &checkpoint, top_k, baseline),
        Command::Imbalance {
            data,
            fractions,
            modality,
        } => commands::imbalance(&common, &data, &fractions, &modality),
        Command::Gradcheck { inject_fault } => {
            commands::gradcheck(&common, inject_fault.as_deref())
        }
        Command::DebugMatches {
            data,
            checkpoint,
            query,
        } => commands::debug_matches(&common, &data, &checkpoint, query),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
    }
}
