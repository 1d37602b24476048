//! `mil-lstm`: data preparation, bag generation, training and analysis.

mod artifact;
mod commands;
mod config;
mod data;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mil_lstm::datasets::{ScenarioKind, Split};

use crate::commands::{EvalArgs, GenerateArgs};
use crate::config::RunConfig;
use crate::fail::{CliResult, Failure};

#[derive(Parser)]
#[command(name = "mil-lstm", version, about = "Multiple instance learning with LSTM bag pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Instance pools.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Bag caches.
    Bags {
        #[command(subcommand)]
        action: BagsAction,
    },
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override of a config field; repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Error rate, permutation robustness and the cardinality study.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bags: PathBuf,
        #[arg(long)]
        perm: Option<usize>,
        /// Comma-separated bag sizes.
        #[arg(long, value_delimiter = ',')]
        cardinality: Option<Vec<usize>>,
        #[arg(long)]
        finetune: bool,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 600)]
        synthetic_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-means purity of singleton representations.
    Cluster {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bags: PathBuf,
        /// `auto` or a cluster count.
        #[arg(long, default_value = "auto")]
        k: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        features_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward LSTM hidden states per step as CSV.
    ExportStates {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bags: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Singleton instance prediction rates.
    InstanceEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bags: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DataAction {
    Prepare {
        #[arg(long, conflicts_with = "synthetic")]
        mnist_dir: Option<PathBuf>,
        /// Synthetic glyphs per class in the training split.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BagsAction {
    Generate {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        task: ScenarioKind,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        m: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 1)]
        k_outliers: usize,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}")),
    }
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Data {
            action:
                DataAction::Prepare {
                    mnist_dir,
                    synthetic,
                    seed,
                    out,
                },
        } => commands::data_prepare(mnist_dir.as_deref(), synthetic, seed, &out),
        Command::Bags {
            action:
                BagsAction::Generate {
                    data,
                    task,
                    n,
                    m,
                    sigma,
                    k_outliers,
                    split,
                    seed,
                    out,
                },
        } => commands::bags_generate(&GenerateArgs {
            data: &data,
            task,
            n,
            m,
            sigma,
            k_outliers,
            split,
            seed,
            out: &out,
        }),
        Command::Train {
            config,
            mut overrides,
            seed,
            out_dir,
        } => {
            let text = config.map(std::fs::read_to_string).transpose()?;
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            if let Some(d) = out_dir {
                overrides.push(format!("out_dir={}", serde_json::to_string(&d)?));
            }
            let cfg = RunConfig::load(text.as_deref(), &overrides)?;
            let (_, json) = commands::train_run(&cfg)?;
            Ok(json)
        }
        Command::Eval {
            ckpt,
            bags,
            perm,
            cardinality,
            finetune,
            finetune_epochs,
            n_test,
            data,
            synthetic_per_class,
            seed,
            out,
        } => commands::eval(&EvalArgs {
            ckpt: &ckpt,
            bags: &bags,
            perm,
            cardinality,
            finetune,
            finetune_epochs,
            n_test,
            data: data.as_deref(),
            synthetic_per_class,
            seed,
            out: out.as_deref(),
        }),
        Command::Cluster {
            ckpt,
            bags,
            k,
            seed,
            features_out,
            out,
        } => {
            let k = match k.as_str() {
                "auto" => None,
                n => Some(n.parse().map_err(|_| Failure::input(format!("--k must be auto or a count, got {n:?}")))?),
            };
            commands::cluster(&ckpt, &bags, k, seed, features_out.as_deref(), out.as_deref())
        }
        Command::ExportStates { ckpt, bags, out } => commands::export_states(&ckpt, &bags, out.as_deref()),
        Command::InstanceEval { ckpt, bags, out } => commands::instance_eval_cmd(&ckpt, &bags, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
