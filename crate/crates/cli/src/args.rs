use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Reference-conditioned mel-spectrogram diffusion at desk scale.
#[derive(Debug, Parser)]
#[command(name = "refdiff", version)]
pub struct Cli {
    /// Print exactly one JSON document on stdout instead of a summary.
    #[arg(long, global = true)]
    pub json: bool,

    /// Default location for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "REFDIFF_OUT_DIR", default_value = "refdiff-out")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect pitch-transition regions in a WAV or MELS file.
    Analyze(AnalyzeArgs),
    /// Gaussian-blur the transition regions of a MELS file.
    Blur(BlurArgs),
    /// Generate a synthetic dataset (MELS files plus a JSON-lines manifest).
    Gendata(GendataArgs),
    /// Train a denoiser from a JSON config.
    Train(TrainArgs),
    /// Sample a spectrogram for one manifest entry.
    Sample(SampleArgs),
    /// Sample every manifest entry and report MSE metrics.
    Eval(EvalArgs),
    /// Train and evaluate ablation variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    /// Smoothing kernel size (odd).
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    /// Region window in frames.
    #[arg(long, default_value_t = 8)]
    pub w: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Loss weight inside regions (reported only).
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
}

#[derive(Debug, Clone, Args)]
pub struct MelArgs {
    #[arg(long, default_value_t = 512)]
    pub frame: usize,
    #[arg(long, default_value_t = 128)]
    pub hop: usize,
    #[arg(long, default_value_t = 80)]
    pub n_mels: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub detect: DetectArgs,
    #[command(flatten)]
    pub mel: MelArgs,
    /// Also write the report to this file.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BlurArgs {
    /// Linear or log MELS input.
    pub input: PathBuf,
    /// Output MELS path (default: <out-dir>/blurred.mels).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Region report from `analyze`; detected automatically when absent.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Gaussian kernel size (odd).
    #[arg(long, default_value_t = 5)]
    pub size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[command(flatten)]
    pub detect: DetectArgs,
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Output directory (default: <out-dir>/data).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reference degradation strength in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    /// Window of the oracle transition regions.
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    #[arg(long, default_value_t = 3)]
    pub min_notes: usize,
    #[arg(long, default_value_t = 8)]
    pub max_notes: usize,
    #[arg(long, default_value_t = 8)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 40)]
    pub max_frames: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config JSON; absent fields take their defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path (default: <out-dir>/model.ckpt).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Loss-curve JSON path (default: next to the checkpoint).
    #[arg(long)]
    pub loss_curve: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Zero-based manifest entry.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output MELS path (default: <out-dir>/sample.mels).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate only the first N entries.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write the metrics JSON here as well.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Base training config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out manifest.
    #[arg(long)]
    pub eval_data: PathBuf,
    /// Comma-separated subset of full,no_weight,no_blur,neither,no_reference.
    #[arg(long, value_delimiter = ',', default_value = "full,no_weight,no_blur,neither,no_reference")]
    pub variants: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub eval_steps: usize,
    /// Step counts evaluated on the first variant.
    #[arg(long, value_delimiter = ',', default_value = "24,54,100")]
    pub step_sweep: Vec<usize>,
    #[arg(long, default_value_t = 1234)]
    pub eval_seed: u64,
    /// Table JSON path (default: <out-dir>/ablation.json).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}
