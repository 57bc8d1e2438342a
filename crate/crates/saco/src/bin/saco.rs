//! `saco`: train, fine-tune, evaluate, and inspect style-aware captioning
//! models on manifest datasets.

use clap::{Args, Parser, Subcommand};
use saco::cli::{self, TrainOverrides};
use saco::data::SyntheticSpec;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "saco", version, about = "Style-aware contrastive captioning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct OverrideArgs {
    /// Weight on the visual contrast loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight on the triplet contrast loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr_train: Option<f64>,
    #[arg(long)]
    lr_finetune: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs_train: Option<usize>,
    #[arg(long)]
    epochs_finetune: Option<usize>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate every k epochs (0 = final only).
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_beam: Option<usize>,
    /// Keep SVC/STC active during fine-tuning.
    #[arg(long)]
    keep_contrastive: Option<bool>,
    #[arg(long)]
    scst_temperature: Option<f64>,
    /// Manifest path override.
    #[arg(long)]
    data: Option<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<String>,
}

impl OverrideArgs {
    fn into_overrides(self) -> TrainOverrides {
        TrainOverrides {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            lr_train: self.lr_train,
            lr_finetune: self.lr_finetune,
            batch: self.batch,
            epochs_train: self.epochs_train,
            epochs_finetune: self.epochs_finetune,
            warmup: self.warmup,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_beam: self.eval_beam,
            keep_contrastive: self.keep_contrastive,
            scst_temperature: self.scst_temperature,
            data: self.data,
            out: self.out,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic manifest dataset with style-conditioned captions.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of items.
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        styles: usize,
        #[arg(long, default_value_t = 9)]
        m: usize,
        #[arg(long, default_value_t = 64)]
        d_raw: usize,
        /// Approximate vocabulary size target.
        #[arg(long, default_value_t = 60)]
        vocab: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Joint-loss training stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Self-critical CIDEr fine-tuning from a checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to start from.
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Score a checkpoint on a dataset with beam search.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        /// Write the metric JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode one (image, style) pair.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file (defaults to vocab.json beside the checkpoint).
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        image_id: String,
        /// Style name or index.
        #[arg(long)]
        style: String,
        #[arg(long, default_value_t = 3)]
        beam: usize,
    },
    /// Score candidate captions against references.
    Score {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the full ranked retrieval table for one anchor at one epoch.
    RetrieveDebug {
        #[arg(long)]
        config: PathBuf,
        /// Anchor image id.
        #[arg(long)]
        anchor: String,
        /// Training epoch the trade-off schedule is evaluated at.
        #[arg(long)]
        epoch: usize,
        /// Score with this checkpoint (default: fresh seeded model).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// CSV output path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData { out, seed, n, styles, m, d_raw, vocab, noise } => {
            let spec = SyntheticSpec {
                n_items: n,
                n_styles: styles,
                m,
                d_raw,
                vocab_size: vocab,
                seed,
                noise,
            };
            cli::cmd_synth_data(&spec, &out)
        }
        Command::Train { config, overrides } => {
            cli::cmd_train(&config, &overrides.into_overrides())
        }
        Command::Finetune { config, init, overrides } => {
            cli::cmd_finetune(&config, &init, &overrides.into_overrides())
        }
        Command::Eval { ckpt, data, beam, out } => {
            cli::cmd_eval(&ckpt, &data, beam, out.as_deref())
        }
        Command::Generate { ckpt, data, vocab, image_id, style, beam } => {
            cli::cmd_generate(&ckpt, &data, vocab.as_deref(), &image_id, &style, beam)
        }
        Command::Score { candidates, references, out } => {
            cli::cmd_score(&candidates, &references, out.as_deref())
        }
        Command::RetrieveDebug { config, anchor, epoch, ckpt, out, overrides } => {
            cli::cmd_retrieve_debug(
                &config,
                &overrides.into_overrides(),
                &anchor,
                epoch,
                ckpt.as_deref(),
                out.as_deref(),
            )
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
