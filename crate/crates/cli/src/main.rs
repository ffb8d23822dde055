//! Command-line surface tying the pipeline together: synthetic data
//! generation, training, alignment, evaluation, runtime benchmarks and the
//! ablation harness. All outputs are plain JSON/CSV.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure. Errors are
//! also written to stderr as one-line JSON. `SGPP_THREADS` caps evaluation
//! worker threads.

mod commands;
mod fileconfig;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "sgalign",
    version,
    about = "Multimodal 3D scene graph alignment pipeline",
    after_help = "Configuration file values (--config, TOML or JSON) fill in any flag \
                  not given explicitly; explicit flags always win."
)]
pub struct Cli {
    /// Base seed for all randomized steps.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML or JSON file with default values for the flags below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for generated artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Suppress progress logging on stderr.
    #[arg(long, global = true, default_value_t = false)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: scene files plus manifest.jsonl.
    GenData(GenDataArgs),
    /// Train a model on a corpus manifest.
    Train(TrainArgs),
    /// Match two scene graph files and optionally emit the unified graph.
    Align(AlignArgs),
    /// Evaluate node matching on a manifest split.
    Eval(EvalArgs),
    /// Per-modality runtime and memory benchmark.
    Bench(BenchArgs),
    /// Ablation sweeps: point resolution, modality subsets, cross-modal.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Number of scenes to generate.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Sub-scan pairs extracted per scene.
    #[arg(long)]
    pub pairs_per_scene: Option<usize>,
    /// Lower bound of the target overlap range.
    #[arg(long)]
    pub overlap_min: Option<f32>,
    /// Upper bound of the target overlap range.
    #[arg(long)]
    pub overlap_max: Option<f32>,
    /// Minimum objects per scene.
    #[arg(long)]
    pub objects_min: Option<usize>,
    /// Maximum objects per scene.
    #[arg(long)]
    pub objects_max: Option<usize>,
    /// Surface points sampled per object.
    #[arg(long)]
    pub points_per_object: Option<usize>,
    /// Gaussian point noise sigma in meters.
    #[arg(long)]
    pub point_noise_sigma: Option<f32>,
    /// Keep the second fragment in the first fragment's frame (T = I4).
    #[arg(long, default_value_t = false)]
    pub identity_transform: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Scene pairs per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate of the cosine schedule.
    #[arg(long)]
    pub lr: Option<f32>,
    /// Per-modality, per-scene dropout probability.
    #[arg(long)]
    pub dropout: Option<f32>,
    /// Chance a scene keeps exactly one modality during training.
    #[arg(long)]
    pub single_modality_dropout: Option<f32>,
    /// Point cloud resolution K (64, 128, 256 or 512).
    #[arg(long)]
    pub point_resolution: Option<usize>,
    /// Mesh surface samples per object.
    #[arg(long)]
    pub mesh_samples: Option<usize>,
    /// Joint embedding dimension D.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Hidden width of projection heads.
    #[arg(long)]
    pub hidden_width: Option<usize>,
    /// Precomputed text embedding file (SGEM) instead of the built-in hasher.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args)]
pub struct AlignArgs {
    /// Source scene graph JSON.
    pub g1: PathBuf,
    /// Reference scene graph JSON.
    pub g2: PathBuf,
    /// Model checkpoint (SGPP).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Match acceptance threshold on the [0,1] similarity.
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Point cloud resolution K.
    #[arg(long)]
    pub point_resolution: Option<usize>,
    /// Mesh surface samples per object.
    #[arg(long)]
    pub mesh_samples: Option<usize>,
    /// Where to write the match JSON (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also merge the two graphs and write the unified graph here.
    #[arg(long)]
    pub unify: Option<PathBuf>,
    /// Precomputed text embedding file (SGEM).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Corpus manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model checkpoint (SGPP).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest split to evaluate: val, train or all.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Transform setting: "random" keeps stored fragments, "identity"
    /// evaluates in the T = I4 setting.
    #[arg(long, default_value = "random")]
    pub transform: String,
    /// Point cloud resolution K.
    #[arg(long)]
    pub point_resolution: Option<usize>,
    /// Mesh surface samples per object.
    #[arg(long)]
    pub mesh_samples: Option<usize>,
    /// Modalities available on the source side (letters from PMSTR).
    #[arg(long, default_value = "PMSTR")]
    pub mask_src: String,
    /// Modalities available on the reference side (letters from PMSTR).
    #[arg(long, default_value = "PMSTR")]
    pub mask_ref: String,
    /// Apply segmentation-noise simulation before evaluating.
    #[arg(long, default_value_t = false)]
    pub predicted: bool,
    /// Where to write the eval JSON (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a "metric,value" CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Precomputed text embedding file (SGEM).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Corpus manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model checkpoint (SGPP).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of pairs to benchmark on.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Timing repetitions per modality subset.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Point cloud resolution K.
    #[arg(long)]
    pub point_resolution: Option<usize>,
    /// Mesh surface samples per object.
    #[arg(long)]
    pub mesh_samples: Option<usize>,
    /// Where to write the runtime CSV (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Sweep axis: resolution, modality or cross-modal.
    #[arg(long)]
    pub axis: String,
    /// Corpus manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model checkpoint (SGPP).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest split to evaluate: val, train or all.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Mesh surface samples per object.
    #[arg(long)]
    pub mesh_samples: Option<usize>,
    /// Point cloud resolution K for non-resolution axes.
    #[arg(long)]
    pub point_resolution: Option<usize>,
    /// Where to write the combined CSV (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failures carrying the intended exit code.
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::Validation(e.to_string());
            eprintln!(
                "{}",
                serde_json::json!({"kind": err.kind(), "message": err.message()})
            );
            return err.exit_code();
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({"kind": err.kind(), "message": err.message()})
            );
            err.exit_code()
        }
    }
}
