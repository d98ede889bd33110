use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use descap_core::data::RatingDimension;
use descap_core::eval::CorrelationMethod;
use descap_core::objectives::{Adapter, Objective};
use descap_core::MediationMode;

use crate::runner::THREADS_ENV;

#[derive(Debug, Parser)]
#[command(name = "descap", version, about = "Teach a toy dual encoder to prefer descriptions over captions")]
pub struct Cli {
    /// Worker threads for per-example work; 1 gives bitwise-reproducible runs
    /// on any machine [default: number of cores]
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset, zero-shot task, lexicon and ratings
    GenData(GenDataArgs),
    /// Contrastive pretraining from scratch
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint, saving one checkpoint per epoch
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint
    Eval(EvalArgs),
    /// Integrated-gradients token attributions
    Attribute(AttributeArgs),
    /// Pick the checkpoint with the best accuracy/transfer trade-off
    Select(SelectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator settings (JSON); built-in defaults when omitted
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Override the spec's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Run configuration (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override pretrain.epochs
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Run configuration (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Training objective [default: from config, else behavioral]
    #[arg(long, value_parser = parse_objective)]
    pub objective: Option<Objective>,
    /// Which parameters to train [default: from config, else lora]
    #[arg(long, value_parser = parse_adapter)]
    pub adapter: Option<Adapter>,
    /// Interchange weight of the joint objective [default: from config, else 0.5]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Override train.learning_rate [default: from config, else 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override train.epochs [default: from config, else 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the config's seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Starting checkpoint [default: <checkpoint_dir>/pretrained.ckpt]
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Output directory [default: <checkpoint_dir>/<objective>-<adapter>]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalTask {
    /// Desc>Cap rate on triplets (paths.test)
    Concadia,
    /// Zero-shot macro-F1 (paths.zeroshot task manifest)
    Zeroshot,
    /// Correlation with human ratings (paths.human_eval)
    Correlation,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub task: EvalTask,
    /// Rating dimension for the correlation task
    #[arg(long, default_value = "overall", value_parser = parse_dimension)]
    pub dimension: RatingDimension,
    /// Coefficient reported as the headline value of the correlation task
    #[arg(long, default_value = "pearson", value_parser = parse_method)]
    pub method: CorrelationMethod,
    /// Data file for the task; overrides the path taken from --config
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Run configuration supplying data paths
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TextChoice {
    Description,
    Caption,
    Both,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Triplets to attribute (JSON lines)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "none", value_parser = parse_mediation)]
    pub mediation: MediationMode,
    /// Riemann steps along the integration path
    #[arg(long, default_value_t = descap_core::attribution::DEFAULT_IG_STEPS)]
    pub steps: usize,
    /// Which text of each triplet to attribute
    #[arg(long, value_enum, default_value = "both")]
    pub texts: TextChoice,
    /// Only the first N triplets
    #[arg(long)]
    pub limit: Option<usize>,
    /// Lexicon (JSON lines) to correlate attributions with
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Write reports as JSON lines here instead of printing a heatmap
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write an HTML heatmap
    #[arg(long)]
    pub html: Option<PathBuf>,
    /// Write the lexicon correlations (JSON) here
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Directory holding metrics.jsonl from a fine-tuning run
    #[arg(long)]
    pub metrics_dir: PathBuf,
    /// Pretrained per-task zero-shot F1 (JSON object task -> F1)
    #[arg(long)]
    pub baseline: PathBuf,
    /// Weight of Desc>Cap accuracy in the trade-off
    #[arg(long, default_value_t = descap_core::eval::DEFAULT_TRADEOFF_ALPHA)]
    pub alpha: f64,
    /// Write the full selection table (JSON) here
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: descap_core::Error| e.to_string())
}

fn parse_adapter(s: &str) -> Result<Adapter, String> {
    s.parse().map_err(|e: descap_core::Error| e.to_string())
}

fn parse_mediation(s: &str) -> Result<MediationMode, String> {
    s.parse().map_err(|e: descap_core::Error| e.to_string())
}

fn parse_dimension(s: &str) -> Result<RatingDimension, String> {
    s.parse().map_err(|e: descap_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<CorrelationMethod, String> {
    match s {
        "pearson" => Ok(CorrelationMethod::Pearson),
        "spearman" => Ok(CorrelationMethod::Spearman),
        other => Err(format!("unknown correlation method {other:?}")),
    }
}
