//! Command-line surface.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::RunConfig;
use crate::experiments::{self, TrainOptions};

#[derive(Debug, Parser)]
#[command(
    name = "ftp",
    version,
    about = "Future token prediction models: training, sampling, gridworld and probes"
)]
pub struct Cli {
    /// Worker threads for parallel evaluation (0 = one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration sources, applied in order: preset, file, `--set`, flags.
#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// Starting point: desk, large, tiny, lm-smoke, grid or grid-smoke.
    #[arg(long)]
    pub preset: Option<String>,
    /// key=value file with section prefixes (e.g. model.dim=128).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory (default: $FTP_OUT_DIR or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Checkpoint and stop once this many steps are done.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Stop at the first validation pass with first-token loss at or below
    /// this value (for loss-matched comparisons).
    #[arg(long)]
    pub until_val_k0: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a GPT or FTP language model on a token corpus.
    TrainLm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// gpt or ftp.
        #[arg(long)]
        kind: Option<String>,
        /// Packed corpus, .txt file, or `bundled`.
        #[arg(long)]
        corpus: Option<String>,
    },
    /// Train on a gridworld dataset, scoring the test set each epoch.
    TrainGrid {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        train_file: Option<PathBuf>,
        #[arg(long)]
        test_file: Option<PathBuf>,
    },
    /// Sample a continuation from a checkpoint.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        /// gpt, ftp_single or ftp_lookahead.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Candidates scored by lookahead.
        #[arg(long = "lookahead-k")]
        lookahead_k: Option<usize>,
        /// Greedy decoder steps after each candidate.
        #[arg(long = "lookahead-l")]
        lookahead_l: Option<usize>,
        /// Tokens to generate.
        #[arg(short, long)]
        n: Option<usize>,
    },
    /// Gridworld datasets: generate, evaluate, inspect.
    Gridworld {
        #[command(subcommand)]
        command: GridCommand,
    },
    /// Representation probes.
    Probe {
        #[command(subcommand)]
        command: ProbeCommand,
    },
    /// Parameter counts for the configured model.
    ParamCount {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        kind: Option<String>,
    },
    /// List every configuration key with its resolved value.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum GridCommand {
    /// Generate train and test datasets with disjoint unique programs.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train_out: Option<PathBuf>,
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint, or of the reference oracle.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Answer with the reference programs (sanity check of the scorer).
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
    },
    /// Print one instance as ASCII grids.
    Inspect {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProbeCommand {
    /// Cosine similarity of embeddings by token separation.
    Similarity {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-offset future-token perplexities (MLP probes, decoder readouts).
    Future {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Repeat to probe several models in one table.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Mean-pooled embedding classifier on labeled text.
    Classify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Permute labels first; accuracy should fall to chance.
        #[arg(long)]
        shuffle_labels: bool,
    },
}

fn resolve(
    args: &ConfigArgs,
    default_preset: &str,
    flags: &[(&str, Option<String>)],
) -> Result<RunConfig> {
    let mut sets = args.sets.clone();
    let named = [
        (
            "run.out_dir",
            args.out.as_ref().map(|p| p.display().to_string()),
        ),
        ("run.seed", args.seed.map(|s| s.to_string())),
    ];
    for (k, v) in named.iter().chain(flags) {
        if let Some(v) = v {
            sets.push(format!("{k}={v}"));
        }
    }
    let cfg = RunConfig::resolve(
        args.preset.as_deref().unwrap_or(default_preset),
        args.config.as_deref(),
        &sets,
    )?;
    Ok(cfg)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn init_threads(cli: Option<usize>, cfg: &RunConfig) {
    let n = cli.unwrap_or(cfg.threads);
    if n > 0 {
        // a second initialization (e.g. in tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn opts(t: &TrainArgs) -> TrainOptions {
    TrainOptions {
        resume: t.resume,
        stop_after: t.stop_after,
        until_val_k0: t.until_val_k0,
    }
}

/// Run a parsed command. Returns the JSON summary, or plain text for
/// `gridworld inspect` and `config`.
pub fn run(cli: Cli) -> Result<Output> {
    let threads = cli.threads;
    let with = |cfg: RunConfig| {
        init_threads(threads, &cfg);
        cfg
    };
    Ok(match cli.command {
        Command::TrainLm {
            cfg,
            train,
            kind,
            corpus,
        } => {
            let c = with(resolve(
                &cfg,
                "desk",
                &[("model.kind", kind), ("train.corpus", corpus)],
            )?);
            Output::Json(experiments::train_lm(&c, &opts(&train))?)
        }
        Command::TrainGrid {
            cfg,
            train,
            kind,
            train_file,
            test_file,
        } => {
            let files = [
                ("model.kind", kind),
                (
                    "grid.train_file",
                    train_file.map(|p| p.display().to_string()),
                ),
                ("grid.test_file", test_file.map(|p| p.display().to_string())),
            ];
            let c = with(resolve(&cfg, "grid", &files)?);
            Output::Json(experiments::train_grid(&c, &opts(&train))?)
        }
        Command::Generate {
            cfg,
            checkpoint,
            prompt,
            strategy,
            top_k,
            temperature,
            lookahead_k,
            lookahead_l,
            n,
        } => {
            let flags = [
                ("sample.prompt", prompt),
                ("sample.strategy", strategy),
                ("sample.top_k", s(&top_k)),
                ("sample.temperature", s(&temperature)),
                ("sample.lookahead_k", s(&lookahead_k)),
                ("sample.lookahead_l", s(&lookahead_l)),
                ("sample.n_tokens", s(&n)),
            ];
            let c = with(resolve(&cfg, "desk", &flags)?);
            Output::Json(experiments::generate_text(&c, &checkpoint)?)
        }
        Command::Gridworld { command } => match command {
            GridCommand::Gen {
                cfg,
                train_out,
                test_out,
            } => {
                let c = with(resolve(&cfg, "grid", &[])?);
                Output::Json(experiments::grid_gen(
                    &c,
                    train_out.as_deref(),
                    test_out.as_deref(),
                )?)
            }
            GridCommand::Eval {
                cfg,
                dataset,
                checkpoint,
                oracle: _,
            } => {
                let c = with(resolve(&cfg, "grid", &[])?);
                Output::Json(experiments::grid_eval(&c, &dataset, checkpoint.as_deref())?)
            }
            GridCommand::Inspect { dataset, index } => {
                Output::Text(experiments::grid_inspect(&dataset, index)?)
            }
        },
        Command::Probe { command } => match command {
            ProbeCommand::Similarity { cfg, checkpoint } => {
                let c = with(resolve(&cfg, "desk", &[])?);
                Output::Json(experiments::probe_similarity(&c, &checkpoint)?)
            }
            ProbeCommand::Future { cfg, checkpoint } => {
                let c = with(resolve(&cfg, "desk", &[])?);
                Output::Json(experiments::probe_future(&c, &checkpoint)?)
            }
            ProbeCommand::Classify {
                cfg,
                checkpoint,
                shuffle_labels,
            } => {
                let c = with(resolve(&cfg, "desk", &[])?);
                Output::Json(experiments::probe_classify(
                    &c,
                    &checkpoint,
                    shuffle_labels,
                )?)
            }
        },
        Command::ParamCount { cfg, kind } => {
            let c = resolve(&cfg, "desk", &[("model.kind", kind)])?;
            Output::Json(experiments::param_count(&c)?)
        }
        Command::Config { cfg } => Output::Text(resolve(&cfg, "desk", &[])?.to_text()),
    })
}

pub enum Output {
    Json(Value),
    Text(String),
}
