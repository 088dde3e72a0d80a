use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "moe-lens", version, about = "Split dense FFNs into experts, profile per-language expert use, prune by frequency")]
pub struct Cli {
    /// Worker threads. Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Cluster each layer's FFN neurons into balanced experts.
    Split(SplitArgs),
    /// Count per-expert activation frequencies on a corpus.
    Profile(ProfileArgs),
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    #[command(subcommand)]
    Prune(PruneCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
    #[command(subcommand)]
    Render(RenderCmd),
    /// Write a seeded toy model, optionally trained, plus synthetic corpora.
    GenToy(GenToyArgs),
    /// Run the whole pipeline on a built-in fixture.
    Repro(ReproArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum InitArg {
    #[value(name = "kmeans++")]
    #[serde(rename = "kmeans++")]
    KmeansPlusPlus,
    #[serde(rename = "random")]
    Random,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub experts: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub max_iterations: usize,
    #[arg(long, value_enum, default_value_t = InitArg::KmeansPlusPlus)]
    pub init: InitArg,
    /// Standardize neuron features before clustering.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub partition: PathBuf,
    /// JSON-lines corpus of {"text": ...} objects.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub lang: String,
    /// Experts selected per token; defaults to 10% of all experts.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 10_000)]
    pub max_samples: usize,
    /// Model label written to the header; defaults to the model file stem.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Vocabulary file (one piece per line) extending the byte tokenizer.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Compare frequency matrices.
#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeCmd {
    /// Pairwise Euclidean, KL and Pearson between languages.
    Similarity {
        #[arg(required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Number of languages in which each expert reaches the threshold.
    Shared {
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        #[arg(required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tuned minus base frequencies.
    Diff {
        base: PathBuf,
        tuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Build expert masks and estimate their cost.
#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneCmd {
    /// Keep experts with frequency >= tau.
    Threshold {
        #[arg(long)]
        freq: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep the most frequent percent of experts in every layer.
    Top {
        #[arg(long)]
        freq: PathBuf,
        #[arg(long)]
        percent: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random mask with the same per-layer keep counts as another mask.
    Random {
        #[arg(long)]
        like: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOPs per token with and without a mask.
    Flops {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 200)]
        seq_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringArg {
    Normalized,
    Raw,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long, requires = "partition")]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub max_new_tokens: usize,
    #[arg(long, value_enum, default_value_t = ScoringArg::Normalized)]
    pub scoring: ScoringArg,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

/// Evaluate a model, optionally under an expert mask.
#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalCmd {
    /// Token-weighted perplexity on a JSON-lines corpus.
    Ppl(EvalArgs),
    /// Multiple-choice accuracy.
    Mcq(EvalArgs),
    /// Greedy generation, exact match on the final number.
    Gen(EvalArgs),
}

/// Draw SVG heatmaps.
#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderCmd {
    Heatmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    Diff {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    Shared {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    Similarity {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 259)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq_len: usize,
    #[arg(long)]
    pub tie_embeddings: bool,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Training steps on the synthetic bilingual corpus (0 keeps random weights).
    #[arg(long, default_value_t = 0)]
    pub train_steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub learning_rate: f64,
    /// Also write the synthetic corpora and evaluation fixtures here.
    #[arg(long)]
    pub corpus_dir: Option<PathBuf>,
    /// Continue training this model instead of starting from random weights.
    #[arg(long)]
    pub tune_from: Option<PathBuf>,
    /// Corpora used with --tune-from.
    #[arg(long, requires = "tune_from")]
    pub tune_data: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fixture {
    ToyBilingual,
}

#[derive(Debug, Args, Serialize)]
pub struct ReproArgs {
    #[arg(long, value_enum)]
    pub fixture: Fixture,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}
