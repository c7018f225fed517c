//! `fairstyle`: debias style-based generators by editing their style space.
//!
//! Subcommands mirror the workflow stages: `discover` the channel
//! controlling an attribute, `debias` by optimizing a fairstyle tensor,
//! `audit` attribute distributions, `sample` images from the (de)biased
//! model, `synth` a ground-truth synthetic fixture, and `pipeline` to run
//! the whole chain from one config file.
//!
//! All randomness flows from the given seed through documented derivations,
//! so every artifact is reproducible from its recorded seed and config hash.
//! Set `FAIRSTYLE_CACHE` to relocate model-asset lookups and
//! `SOURCE_DATE_EPOCH` to pin artifact timestamps.

mod commands;
mod config;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::ValidationError;

#[derive(Parser)]
#[command(name = "fairstyle", version, about = "Style-space debiasing for generative models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GeneratorOpts {
    /// Generator source: a synthetic spec JSON (or a checkpoint understood
    /// by --adapter).
    #[arg(long)]
    generator: PathBuf,
    /// Adapter used to load --generator.
    #[arg(long, default_value = "synthetic")]
    adapter: String,
}

#[derive(Args)]
struct LabelOpts {
    /// Classifier document for one attribute, as NAME=PATH (repeatable).
    #[arg(long = "classifier", value_name = "NAME=PATH")]
    classifiers: Vec<String>,
    /// Positive prompt for embedding-based labeling of a single attribute.
    #[arg(long)]
    text_positive: Option<String>,
    /// Negative prompt paired with --text-positive.
    #[arg(long)]
    text_negative: Option<String>,
    /// Embedding dimension of the built-in deterministic backend.
    #[arg(long, default_value_t = 64)]
    embedding_dim: usize,
    /// Seed of the built-in deterministic embedding backend.
    #[arg(long, default_value_t = 0)]
    embedding_seed: u64,
}

#[derive(Args)]
struct DiscoverArgs {
    #[command(flatten)]
    generator: GeneratorOpts,
    /// Attribute to locate the controlling channel for.
    #[arg(long)]
    attribute: String,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 10.0)]
    perturbation: f64,
    #[arg(long, default_value_t = 4)]
    exclude_last_blocks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON with the best channel and the full ranking.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    label: LabelOpts,
}

#[derive(Args)]
struct DebiasArgs {
    #[command(flatten)]
    generator: GeneratorOpts,
    /// Comma-separated attribute names (one = scalar tensor, several =
    /// affine-coupled joint tensor).
    #[arg(long)]
    attributes: String,
    /// `auto` to discover channels, or an explicit `(l,c);(l,c)` list.
    #[arg(long, default_value = "auto")]
    channels: String,
    /// Style-space direction JSON for direction-scaled debiasing
    /// (single attribute; overrides --channels).
    #[arg(long)]
    direction: Option<PathBuf>,
    /// Batch size per optimizer iteration.
    #[arg(long, default_value_t = 128)]
    n: usize,
    /// Sample count for frozen channel statistics.
    #[arg(long = "stats-n", default_value_t = 1000)]
    stats_n: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long = "max-iters", default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long = "fd-step", default_value_t = 0.05)]
    fd_step: f64,
    /// Reuse one fixed batch across iterations instead of fresh batches.
    #[arg(long)]
    fixed_batch: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output tensor document.
    #[arg(long)]
    out: PathBuf,
    /// Optional optimization trace JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    label: LabelOpts,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    generator: GeneratorOpts,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Comma-separated attribute names to audit marginally.
    #[arg(long)]
    attributes: String,
    /// Joint distribution request like `male+eyeglasses` (repeatable).
    #[arg(long)]
    joint: Vec<String>,
    /// Fairstyle tensor to apply before auditing.
    #[arg(long)]
    tensor: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV path (one row per distribution cell).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, default_value = "json")]
    format: String,
    #[command(flatten)]
    label: LabelOpts,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    generator: GeneratorOpts,
    /// Fairstyle tensor to apply; its fingerprint must match the generator.
    #[arg(long)]
    tensor: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the images and manifest.json.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic generator spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Oracle summary output (ground-truth rates, offsets, expected cells).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config JSON; see the repository README for the schema.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Find the style channel controlling an attribute.
    Discover(DiscoverArgs),
    /// Optimize a fairstyle tensor for one or more attributes.
    Debias(DebiasArgs),
    /// Measure marginal/joint attribute distributions and KL to uniform.
    Audit(AuditArgs),
    /// Generate images (optionally debiased) plus a reproducibility manifest.
    Sample(SampleArgs),
    /// Materialize a synthetic oracle fixture and dump its ground truth.
    Synth(SynthArgs),
    /// Run discover -> debias -> audit end to end from a config file.
    Pipeline(PipelineArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Discover(args) => commands::run_discover(args),
        Command::Debias(args) => commands::run_debias(args),
        Command::Audit(args) => commands::run_audit(args),
        Command::Sample(args) => commands::run_sample(args),
        Command::Synth(args) => commands::run_synth(args),
        Command::Pipeline(args) => commands::run_pipeline(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Machine-readable error document on stderr; validation failures
            // name the offending config field.
            let doc = match err.downcast_ref::<ValidationError>() {
                Some(v) => json!({
                    "error": "validation",
                    "field": v.field,
                    "message": v.message,
                }),
                None => json!({
                    "error": "runtime",
                    "message": format!("{err:#}"),
                }),
            };
            eprintln!("{doc}");
            if err.downcast_ref::<ValidationError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
