mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_iqa::data::ImageStorage;
use latent_iqa::sft::LatentFeed;

use crate::config::{ConfigError, List, Settings};

/// Latent-space quality reasoning: data synthesis, two-stage training,
/// evaluation and single-image inference.
#[derive(Parser, Debug)]
#[command(name = "latent-iqa", version)]
struct Cli {
    /// Flat `key = value` settings file. Flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for data, initialization, shuffling and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate Stage I, Stage II and held-out JSONL corpora.
    SynthData(SynthArgs),
    /// Stage I: supervised next-token plus latent reconstruction training.
    TrainSft(SftArgs),
    /// Stage II: group-relative policy optimization from a Stage I checkpoint.
    TrainGrpo(GrpoArgs),
    /// Score a JSONL set and report PLCC/SRCC.
    Eval(EvalArgs),
    /// Run one image through the model and print the response.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub n_stage1: Option<usize>,
    #[arg(long)]
    pub n_stage2: Option<usize>,
    #[arg(long)]
    pub n_heldout: Option<usize>,
    /// Distortion, quality and general-vision weights for Stage I, e.g. `40,40,20`.
    #[arg(long)]
    pub mix: Option<List<f64>>,
    /// `path` writes PNG files, `base64` inlines data URIs.
    #[arg(long)]
    pub storage: Option<ImageStorage>,
    /// Severities used for training records, e.g. `1,3,5`.
    #[arg(long)]
    pub severities: Option<List<u8>>,
    /// Severities used for held-out records; defaults to the training set.
    #[arg(long)]
    pub heldout_severities: Option<List<u8>>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long)]
    pub visual_dim: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SftArgs {
    /// Stage I JSONL corpus.
    #[arg(long)]
    pub data: Option<String>,
    /// Output directory for `sft.ckpt` and `sft_trace.csv`.
    #[arg(long)]
    pub out: Option<String>,
    /// Continue from a Stage I checkpoint, restoring optimizer moments and step.
    #[arg(long)]
    pub resume: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Maximum latent steps per response.
    #[arg(long)]
    pub latent_budget: Option<usize>,
    /// Weight of the latent reconstruction loss; 0 disables it.
    #[arg(long)]
    pub lambda_lvr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cosine decay target as a fraction of `--lr`.
    #[arg(long)]
    pub final_lr_fraction: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// `teacher` feeds ground-truth ROI tokens at latent steps, `model` feeds
    /// the model's own reconstructions.
    #[arg(long)]
    pub latent_feed: Option<LatentFeed>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub include_prompt_loss: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub supervise_stop: Option<bool>,
}

#[derive(Args, Debug)]
pub struct GrpoArgs {
    /// Stage II JSONL corpus.
    #[arg(long)]
    pub data: Option<String>,
    /// Stage I checkpoint; initial policy and frozen KL reference.
    #[arg(long)]
    pub init: Option<String>,
    /// Continue from a Stage II checkpoint.
    #[arg(long)]
    pub resume: Option<String>,
    /// Output directory for `grpo.ckpt` and `grpo_trace.csv`.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub clip_epsilon: Option<f64>,
    #[arg(long)]
    pub kl_beta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub latent_budget: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub records_per_iteration: Option<usize>,
    #[arg(long)]
    pub updates_per_phase: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize_advantages: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub kl_group_mean: Option<bool>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// JSONL records in the Stage II format.
    #[arg(long)]
    pub data: Option<String>,
    /// Output directory for `<dataset>_items.csv` and `<dataset>_summary.csv`.
    #[arg(long)]
    pub out: Option<String>,
    /// Dataset label; defaults to the data file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Record attention shares of the answer tokens.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub probe_attention: Option<bool>,
    /// Report PLCC after a four-parameter logistic fit.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub logistic_plcc: Option<bool>,
    #[arg(long)]
    pub latent_budget: Option<usize>,
    /// 0 decodes greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// PNG image; resized to the model resolution if needed.
    #[arg(long)]
    pub image: Option<String>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub latent_budget: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<latent_iqa::Error>() {
            return e.kind();
        }
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "other"
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.get("seed", cli.seed, 0u64)?;
    match cli.command {
        Command::SynthData(a) => commands::synth_data(&mut settings, seed, a),
        Command::TrainSft(a) => commands::train_sft(&mut settings, seed, a),
        Command::TrainGrpo(a) => commands::train_grpo(&mut settings, seed, a),
        Command::Eval(a) => commands::eval(&mut settings, seed, a),
        Command::Infer(a) => commands::infer(&mut settings, seed, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err:#}", error_kind(&err));
            ExitCode::FAILURE
        }
    }
}
