//! `tse`: data synthesis, training, fine-tuning, extraction and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use tse_core::eval::QueryMode;
use tse_core::synth::Split;

use commands::{EvaluateArgs, ExtractArgs, System};
use config::PipelineConfig;

/// Marks errors caused by how the program was invoked (exit status 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "tse", version, about = "Target sound extraction with latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML configuration file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. --set train.lr=0.001 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; takes precedence over the file and --set
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        PipelineConfig::resolve(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a mixture dataset and fit the codec, embedder and classifier
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of class-labelled WAV clips (overrides corpus.root)
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Output dataset directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model from scratch or resume from a checkpoint
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory written by synth-data
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory for checkpoints and the training log
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from this checkpoint
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a few examples of new classes
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Base checkpoint
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Dataset directory; its training split supplies the examples
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Only use these classes (repeatable)
        #[arg(long = "class", value_name = "LABEL")]
        classes: Vec<String>,
        /// Keep at most this many examples per class
        #[arg(long, value_name = "K")]
        shots: Option<usize>,
    },
    /// Extract the queried sound from a mixture
    #[command(group(ArgGroup::new("reference").required(true).args(["ref_audio", "ref_text"])))]
    Extract {
        /// Model checkpoint
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Directory holding codec.json and embedder.json [default: checkpoint directory]
        #[arg(long, value_name = "DIR")]
        assets: Option<PathBuf>,
        /// Mixture WAV
        #[arg(long, value_name = "WAV")]
        mixture: PathBuf,
        /// Audio query: a clip of the target sound
        #[arg(long, value_name = "WAV")]
        ref_audio: Option<PathBuf>,
        /// Text query: a class label
        #[arg(long, value_name = "LABEL")]
        ref_text: Option<String>,
        /// Guidance scale [default: 2.5 for audio, 3.0 for text]
        #[arg(long)]
        gamma: Option<f64>,
        /// Number of sampling steps
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Sampler seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output WAV; parameters are recorded in <OUT>.json
        #[arg(long, value_name = "WAV")]
        out: PathBuf,
    },
    /// Score a system on a dataset split
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory written by synth-data
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Split to evaluate
        #[arg(long, default_value = "test")]
        split: Split,
        /// What produces the estimates
        #[arg(long, value_enum, default_value = "model")]
        system: System,
        /// Model checkpoint (for --system model)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Query modality
        #[arg(long, value_enum, default_value = "audio")]
        query: QueryArg,
        /// Guidance scale [default: 2.5 for audio, 3.0 for text]
        #[arg(long)]
        gamma: Option<f64>,
        /// Number of sampling steps
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Evaluate at most this many items
        #[arg(long)]
        limit: Option<usize>,
        /// Output directory for report.jsonl and report.csv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum QueryArg {
    Audio,
    Text,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData { config, corpus, out } => commands::synth_data(&config.resolve()?, corpus.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = config.resolve()?;
            if cfg.model.double_precision {
                commands::train_cmd::<f64>(&cfg, &data, &out, resume.as_deref())
            } else {
                commands::train_cmd::<f32>(&cfg, &data, &out, resume.as_deref())
            }
        }
        Command::Finetune {
            config,
            checkpoint,
            data,
            out,
            classes,
            shots,
        } => {
            let mut cfg = config.resolve()?;
            cfg.train = cfg.train.few_shot_variant();
            if cfg.model.double_precision {
                commands::finetune_cmd::<f64>(&cfg, &checkpoint, &data, &out, &classes, shots)
            } else {
                commands::finetune_cmd::<f32>(&cfg, &checkpoint, &data, &out, &classes, shots)
            }
        }
        Command::Extract {
            checkpoint,
            assets,
            mixture,
            ref_audio,
            ref_text,
            gamma,
            steps,
            seed,
            out,
        } => commands::extract_cmd::<f32>(&ExtractArgs {
            checkpoint,
            assets,
            mixture,
            ref_audio,
            ref_text,
            gamma,
            steps,
            seed,
            out,
        }),
        Command::Evaluate {
            config,
            data,
            split,
            system,
            checkpoint,
            query,
            gamma,
            steps,
            limit,
            out,
        } => commands::evaluate_cmd::<f32>(
            &config.resolve()?,
            &EvaluateArgs {
                data,
                split,
                system,
                checkpoint,
                query: match query {
                    QueryArg::Audio => QueryMode::Audio,
                    QueryArg::Text => QueryMode::Text,
                },
                gamma,
                steps,
                limit,
                out,
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
