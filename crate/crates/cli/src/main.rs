mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::{IniFile, Overrides, RunConfig};
use fvp_core::data::Split;
use fvp_core::error::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

/// Vision-conditioned dialogue completion: corpus preparation,
/// chain-of-thought augmentation, training, evaluation, completion and
/// masking sweeps.
#[derive(Parser)]
#[command(name = "fvp", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct ConfigArgs {
    /// Sectioned key = value config file; flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: desk or paper
    #[arg(long)]
    preset: Option<String>,
    /// Root seed for the command
    #[arg(long)]
    seed: Option<u64>,
    /// Append chain-of-thought annotations to encoded sources
    #[arg(long)]
    use_mcot: bool,
}

#[derive(clap::Args, Clone, Default)]
struct DecodeArgs {
    /// Beam size
    #[arg(long)]
    beam: Option<usize>,
    /// Length penalty exponent
    #[arg(long)]
    alpha: Option<f64>,
    /// Maximum generated tokens per sequence
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus with feature files
    SynthData {
        /// Corpus seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of records
        #[arg(long, default_value_t = 40)]
        n: usize,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Content word count
        #[arg(long, default_value_t = 24)]
        vocab_size: usize,
        /// Local visual tokens per image
        #[arg(long, default_value_t = 6)]
        local_tokens: usize,
        /// Visual feature width
        #[arg(long, default_value_t = 16)]
        vision_width: usize,
        /// train,valid,test counts (default roughly 80/10/10)
        #[arg(long)]
        split: Option<String>,
    },
    /// Build the token vocabulary over the training split
    PrepareVocab {
        /// Dataset directory (train split) or a records file (all records)
        #[arg(long)]
        train: PathBuf,
        /// Output vocabulary file
        #[arg(long)]
        out: PathBuf,
        /// Minimum token count to keep
        #[arg(long, default_value_t = 1)]
        min_count: usize,
    },
    /// Annotate records with three-hop theme/opinion/future fields
    McotAugment {
        /// Input records file
        #[arg(long = "in")]
        input: PathBuf,
        /// Output records file
        #[arg(long)]
        out: PathBuf,
        /// Completion backend: mock or http
        #[arg(long, default_value = "mock")]
        client: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model on a dataset directory
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and metrics
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary file (defaults to vocab.txt in the data directory)
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Resume from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epoch count
        #[arg(long)]
        epochs: Option<usize>,
        /// Hard cap on optimizer steps
        #[arg(long)]
        max_steps: Option<u64>,
        /// Stop once the train loss falls below this value
        #[arg(long)]
        target_loss: Option<f64>,
        /// Train without the vision path (ablation)
        #[arg(long)]
        no_vision: bool,
    },
    /// Score a checkpoint with per-language and average BLEU
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Split: train, valid or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Vocabulary file (defaults to vocab.txt in the data directory)
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Write a line-delimited report here
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Decode one record and print source, prediction and target
    Complete {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Record id to complete
        #[arg(long)]
        record_id: String,
        /// Vocabulary file (defaults to vocab.txt in the data directory)
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Evaluate under increasing source masking and write a CSV
    MaskSweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Split: train, valid or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated masking ratios in [0, 1]
        #[arg(long, default_value = "0,0.2,0.4,0.6,0.8")]
        ratios: String,
        /// Output CSV path
        #[arg(long)]
        out_csv: PathBuf,
        /// Vocabulary file (defaults to vocab.txt in the data directory)
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
}

fn build_config(
    args: &ConfigArgs,
    decode: Option<&DecodeArgs>,
    extra: Overrides,
) -> Result<RunConfig> {
    let ini = match &args.config {
        Some(path) => Some(IniFile::load(path)?),
        None => None,
    };
    let mut overrides = extra;
    overrides.preset = args.preset.clone().or(overrides.preset);
    overrides.seed = args.seed.or(overrides.seed);
    if args.use_mcot {
        overrides.use_mcot = Some(true);
    }
    if let Some(d) = decode {
        overrides.beam = d.beam.or(overrides.beam);
        overrides.alpha = d.alpha.or(overrides.alpha);
        overrides.max_len = d.max_len.or(overrides.max_len);
    }
    RunConfig::build(ini.as_ref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            seed,
            n,
            out,
            vocab_size,
            local_tokens,
            vision_width,
            split,
        } => commands::cmd_synth_data(seed, n, &out, vocab_size, local_tokens, vision_width, split),
        Command::PrepareVocab {
            train,
            out,
            min_count,
        } => commands::cmd_prepare_vocab(&train, &out, min_count),
        Command::McotAugment {
            input,
            out,
            client,
            config,
        } => {
            let run_config = build_config(&config, None, Overrides::default())?;
            commands::cmd_mcot_augment(&input, &out, &client, &run_config)
        }
        Command::Train {
            config,
            data,
            out,
            vocab,
            resume,
            epochs,
            max_steps,
            target_loss,
            no_vision,
        } => {
            let overrides = Overrides {
                epochs,
                max_steps,
                target_loss,
                no_vision: if no_vision { Some(true) } else { None },
                ..Default::default()
            };
            let run_config = build_config(&config, None, overrides)?;
            commands::cmd_train(run_config, &data, &out, vocab.as_deref(), resume.as_deref())
        }
        Command::Evaluate {
            config,
            checkpoint,
            data,
            split,
            vocab,
            out,
            decode,
        } => {
            let run_config = build_config(&config, Some(&decode), Overrides::default())?;
            let split: Split = split.parse()?;
            commands::cmd_evaluate(
                &run_config,
                &checkpoint,
                &data,
                split,
                vocab.as_deref(),
                out.as_deref(),
            )
        }
        Command::Complete {
            config,
            checkpoint,
            data,
            record_id,
            vocab,
            decode,
        } => {
            let run_config = build_config(&config, Some(&decode), Overrides::default())?;
            commands::cmd_complete(
                &run_config,
                &checkpoint,
                &data,
                &record_id,
                vocab.as_deref(),
            )
        }
        Command::MaskSweep {
            config,
            checkpoint,
            data,
            split,
            ratios,
            out_csv,
            vocab,
            decode,
        } => {
            let seed = config.seed.unwrap_or(0);
            let run_config = build_config(&config, Some(&decode), Overrides::default())?;
            let split: Split = split.parse()?;
            commands::cmd_mask_sweep(
                &run_config,
                &checkpoint,
                &data,
                split,
                &ratios,
                &out_csv,
                vocab.as_deref(),
                seed,
            )
        }
    }
}

/// 0 ok, 1 usage or configuration, 2 data or format, 3 numeric failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) | Error::Shape(_) => 1,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err);
            ExitCode::from(exit_code(&err))
        }
    }
}
