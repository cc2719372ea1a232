//! Command-line surface. Every struct here is also the serialized config echo
//! of a run report, so a report can be re-executed as-is.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgll_core::annotations::{SyntheticSpec, WeightsMode};
use mgll_core::losses::{KlGradMode, LossConfig, LossKind};
use mgll_core::trainer::Ladder;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Parser, Serialize, Deserialize, PartialEq)]
#[command(
    name = "mgll",
    version,
    allow_negative_numbers = true,
    about = "Multi-granular contrastive objectives: evaluation, gradient checks, training and ablations"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Text,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct GlobalArgs {
    /// Seed for every stochastic step; required by stochastic commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write the JSON run report here instead of stdout.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Human-readable output on stdout (the report still goes to `--out`).
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    #[serde(skip)]
    pub format: OutputFormat,
    #[arg(long, global = true, default_value_t = WeightsMode::Uniform)]
    pub weights_mode: WeightsMode,
    #[arg(long, global = true, default_value_t = 0.07)]
    pub tau: f64,
    #[arg(long, global = true, default_value_t = 0.5)]
    pub alpha1: f64,
    #[arg(long, global = true, default_value_t = 1.0)]
    pub alpha2: f64,
    #[arg(long, global = true, default_value_t = 1.0)]
    pub alpha3: f64,
    #[arg(long, global = true, default_value_t = KlGradMode::Exact)]
    pub kl_grad: KlGradMode,
    /// Temperature for the point-wise logits (raw cosines when absent).
    #[arg(long, global = true)]
    pub pointwise_tau: Option<f64>,
    /// Worker threads for `ablate`; results do not depend on it.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub jobs: Option<usize>,
}

impl GlobalArgs {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
            weights_mode: self.weights_mode,
            kl_grad_mode: self.kl_grad,
            pointwise_tau: self.pointwise_tau,
            ..LossConfig::default()
        }
    }
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write a seeded synthetic corpus (manifest plus MGEM embeddings).
    GenSynth(GenSynthArgs),
    /// Evaluate loss values on a manifest or a built-in fixture.
    LossEval(LossEvalArgs),
    /// Compare analytical gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Projected gradient descent on batch embeddings.
    Train(TrainArgs),
    /// Held-out comparison of an ablation ladder.
    Ablate(AblateArgs),
    /// AUC, mAP and accuracy from a scores/truth JSON file.
    Metrics(MetricsArgs),
    /// Re-run the config echoed in a report and compare results bit for bit.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub coarse_labels: usize,
    #[arg(long, default_value_t = 3)]
    pub fine_per_coarse: usize,
    #[arg(long, default_value_t = 2)]
    pub labels_per_sample: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise_sigma: f64,
}

impl SynthArgs {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            n_samples: self.samples,
            dim: self.dim,
            coarse_labels: self.coarse_labels,
            fine_per_coarse: self.fine_per_coarse,
            labels_per_sample: self.labels_per_sample,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct GenSynthArgs {
    /// Output directory for `manifest.json` and the embedding files.
    #[arg(long)]
    pub dir: PathBuf,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fixture {
    /// Two samples, diagonal similarities `[[1, 0], [0, 1]]`.
    Diagonal,
    /// Two samples, all similarities zero.
    ZeroLogit,
    /// Two levels with identical texts.
    IdenticalLevels,
    /// One image, one text.
    SinglePair,
    /// Seeded Gaussian batch (8 samples, d=16, 2 levels).
    Random,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct BatchSource {
    /// Manifest to read samples and embeddings from.
    #[arg(long, conflicts_with = "fixture")]
    pub manifest: Option<PathBuf>,
    /// Built-in batch used when no manifest is given.
    #[arg(long, value_enum)]
    pub fixture: Option<Fixture>,
    /// Use only the first N manifest samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct LossEvalArgs {
    #[command(flatten)]
    pub source: BatchSource,
    /// Losses to evaluate (repeatable).
    #[arg(long = "loss", default_values_t = [LossKind::Mgll])]
    pub losses: Vec<LossKind>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub source: BatchSource,
    #[arg(long, default_value_t = LossKind::Mgll)]
    pub loss: LossKind,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: BatchSource,
    #[arg(long, default_value_t = LossKind::Mgll)]
    pub loss: LossKind,
    #[arg(long, default_value_t = 0.01)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
    /// Keep image embeddings fixed.
    #[arg(long)]
    pub freeze_images: bool,
    /// Also move the text embeddings.
    #[arg(long)]
    pub train_texts: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct AblateArgs {
    /// Fixed corpus; without it each seed generates its own synthetic corpus.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = Ladder::Paper)]
    pub ladder: Ladder,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 150)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long, default_value_t = 0.2)]
    pub held_out: f64,
    /// Fraction of fine-level training labels to drop.
    #[arg(long, default_value_t = 0.0)]
    pub missing_fraction: f64,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct MetricsArgs {
    /// JSON file `{"scores": [[..]], "truth": [[..]]}`, samples by categories.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct ReplayArgs {
    /// Report produced by an earlier run.
    #[arg(long)]
    pub report: PathBuf,
}
