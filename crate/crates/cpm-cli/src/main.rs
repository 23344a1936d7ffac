use std::path::PathBuf;

use clap::{Parser, Subcommand};

use cpm_cli::commands;
use cpm_cli::config::RunConfig;
use cpm_cli::{category, exit_code, message};
use cpm_core::error::Result;
use cpm_core::train::CpmKind;

/// Causal proxy models at desk scale: generate a synthetic dataset, train
/// the black box and its proxies, benchmark effect estimators, and inspect
/// the proxies' explanations.
#[derive(Debug, Parser)]
#[command(name = "cpm", version)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override every seed in the config (generation, training, and
    /// estimate-time draws).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train/dev/test splits and their counterfactual pairs.
    Generate {
        /// Directory to write the dataset into.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the black-box classifier on gold labels.
    TrainBlackbox {
        /// Data directory produced by `generate`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a causal proxy model against a frozen black-box checkpoint.
    TrainCpm {
        /// Proxy variant: "in" (intervention token) or "hi" (interchange).
        #[arg(long)]
        kind: CpmKind,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Black-box checkpoint to distill from.
        #[arg(long, value_name = "PATH")]
        blackbox: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Benchmark effect estimators against ground-truth effects.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        blackbox: PathBuf,
        /// Intervention-token proxy checkpoint (needed by cpm-in).
        #[arg(long, value_name = "PATH")]
        cpm_in: Option<PathBuf>,
        /// Interchange proxy checkpoint (needed by the cpm-hi-* estimators).
        #[arg(long, value_name = "PATH")]
        cpm_hi: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Comma-separated estimator subset; defaults to the config's list.
        #[arg(long, value_delimiter = ',', value_name = "IDS")]
        explainers: Option<Vec<String>>,
        /// Restrict the report to one distance (l2, cosine, or normdiff).
        #[arg(long, value_name = "NAME")]
        metric: Option<String>,
    },
    /// Concept-mediated integrated-gradients attributions for examples.
    Attribute {
        /// Interchange proxy checkpoint to attribute.
        #[arg(long, value_name = "PATH")]
        cpm: PathBuf,
        /// Examples file (JSONL) to read inputs from.
        #[arg(long, value_name = "PATH")]
        examples: PathBuf,
        /// Attribute only the first N examples.
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Neutralize one concept's influence and measure the change.
    Debias {
        /// Interchange proxy checkpoint to debias.
        #[arg(long, value_name = "PATH")]
        cpm: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Concept index to sever.
        #[arg(long)]
        concept: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    match cli.command {
        Command::Generate { out } => commands::cmd_generate(&cfg, &out),
        Command::TrainBlackbox { data, out } => commands::cmd_train_blackbox(&cfg, &data, &out),
        Command::TrainCpm { kind, data, blackbox, out } => {
            commands::cmd_train_cpm(&cfg, kind, &data, &blackbox, &out)
        }
        Command::Evaluate { data, blackbox, cpm_in, cpm_hi, out, explainers, metric } => {
            commands::cmd_evaluate(
                &cfg,
                &data,
                &blackbox,
                cpm_in.as_deref(),
                cpm_hi.as_deref(),
                &out,
                explainers.as_deref(),
                metric.as_deref(),
            )
        }
        Command::Attribute { cpm, examples, limit, out } => {
            commands::cmd_attribute(&cfg, &cpm, &examples, limit, &out)
        }
        Command::Debias { cpm, data, concept, out } => {
            commands::cmd_debias(&cfg, &cpm, &data, concept, &out)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error[{}]: {}", category(&err), message(&err));
            std::process::exit(exit_code(&err));
        }
    }
}
