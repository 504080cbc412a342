use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use evit_core::Variant;

#[derive(Parser, Debug)]
#[command(name = "evit", version, about = "Build, count, run, check and profile EfficientViT-M models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the architecture and its parameter/FLOP counts.
    Info {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Per-part parameter and multiply-accumulate counts.
    Count {
        #[command(flatten)]
        model: ModelArgs,
        /// Input resolution for FLOPs (defaults to the model's own).
        #[arg(long)]
        resolution: Option<usize>,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Run inference on an EVT1 tensor and write the logits as EVT1.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        /// Input tensor [B, 3, R, R]; a random batch from the seed when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Batch size of the random input.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Weights file; parameters come from the seed when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Set BN running statistics from the input batch first.
        #[arg(long)]
        calibrate: bool,
        #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
        dtype: DTypeArg,
        #[arg(long, short, default_value = "logits.evt1")]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
    /// Compare analytic gradients with finite differences on a toy-sized module.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Attention-map similarity between heads, cascaded versus full-feature heads.
    Similarity {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// First-order Taylor channel importance on one random labelled batch.
    Importance {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Fraction of channels kept when computing per-group retention.
        #[arg(long, default_value_t = 0.5)]
        keep: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        loss_scale: f64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Time per operator category, plus end-to-end throughput.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Worker threads for the throughput measurement only.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, value_enum, default_value_t = GranularityArg::Category)]
        granularity: GranularityArg,
        /// Fold BN into the neighbouring layers before timing.
        #[arg(long)]
        fold: bool,
        #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
        dtype: DTypeArg,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Fold every BN into its neighbour and write the folded weights.
    Fold {
        #[command(flatten)]
        model: ModelArgs,
        /// Weights to fold; parameters come from the seed when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also write the unfolded weights here.
        #[arg(long)]
        save_unfolded: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// M0 to M5 (default M0).
    #[arg(long, conflicts_with = "config")]
    pub variant: Option<Variant>,
    /// JSON model spec instead of a named variant.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AttentionArg::Cga)]
    pub attention: AttentionArg,
    /// Every attention head reuses the first head's parameters.
    #[arg(long)]
    pub share_heads: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Table,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    Cga,
    Split,
    Mhsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Category,
    Op,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModuleArg {
    All,
    Linear,
    Conv,
    Dwconv,
    Bn,
    Softmax,
    Cga,
    Sandwich,
    Subsample,
}
