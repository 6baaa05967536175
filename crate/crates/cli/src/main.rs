//! `l2sa`: train, evaluate, and probe the spatial-attention CNN family.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{
    cmd_bench, cmd_eval, cmd_gradcheck, cmd_split, cmd_synth, cmd_train, parse_kernels,
    parse_split_name, BenchSpec, DataSpec, EvalSpec, GradcheckSpec, ModelKind, Precision,
    SplitSpec, SynthSpec, TrainSpec,
};
use config::{CliError, Overlay};
use l2sa_core::train::TrainConfig;

#[derive(Parser)]
#[command(
    name = "l2sa",
    version,
    about = "Spatial-attention CNN toolkit: training, evaluation, gradient checks, benchmarks"
)]
struct Cli {
    /// Flat key=value config file; explicit flags take precedence over it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write run artifacts under the output directory
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on one split
    Eval(EvalArgs),
    /// Certify gradients of the differentiable blocks by finite differences
    Gradcheck(GradcheckArgs),
    /// Time single-image latency and batch throughput
    Bench(BenchArgs),
    /// Compute a deterministic train/val/test split and write its manifest
    Split(SplitArgs),
    /// Render a synthetic corpus to grayscale PNG files
    Synth(SynthArgs),
}

#[derive(Args)]
struct ModelDataArgs {
    /// Architecture: baseline, l2sa, l2sa_noskip, baseline_cbam, vgg16_star [default: l2sa]
    #[arg(long)]
    model: Option<String>,

    /// Data source: `synthetic`, `directory`, or a corpus directory path [default: synthetic]
    #[arg(long)]
    dataset: Option<String>,

    /// Corpus root; implies `--dataset directory`
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,

    /// Samples per class for the synthetic corpus [default: 20]
    #[arg(long)]
    per_class: Option<usize>,

    /// Comma-separated attention kernel sizes, one per site [default: 16,8,4]
    #[arg(long, value_name = "K1,K2,K3")]
    sab_kernels: Option<String>,

    /// Wire the multiplicative skip links between attention sites [default: true]
    #[arg(long, value_name = "BOOL")]
    skips: Option<bool>,

    /// Element width: f32 or f64 [default: f32]
    #[arg(long)]
    precision: Option<String>,
}

impl ModelDataArgs {
    fn model(&self, overlay: &Overlay) -> Result<ModelKind, CliError> {
        let name = overlay.resolve("model", self.model.clone(), "l2sa".to_string())?;
        ModelKind::parse(&name)
    }

    fn data(&self, overlay: &Overlay) -> Result<DataSpec, CliError> {
        let dataset: Option<String> = overlay.resolve_opt("dataset", self.dataset.clone())?;
        let data_root = overlay.resolve_opt("data-root", self.data_root.clone())?;
        let per_class = overlay.resolve("per-class", self.per_class, 20)?;
        DataSpec::parse(dataset.as_deref(), data_root.as_deref(), 3, per_class)
    }

    fn sab_kernels(&self, overlay: &Overlay) -> Result<Vec<usize>, CliError> {
        let raw = overlay.resolve("sab-kernels", self.sab_kernels.clone(), "16,8,4".to_string())?;
        parse_kernels(&raw)
    }

    fn skips(&self, overlay: &Overlay) -> Result<bool, CliError> {
        overlay.resolve("skips", self.skips, true)
    }

    fn precision(&self, overlay: &Overlay) -> Result<Precision, CliError> {
        let raw = overlay.resolve("precision", self.precision.clone(), "f32".to_string())?;
        Precision::parse(&raw)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ModelDataArgs,

    /// Training epochs [default: 50]
    #[arg(long)]
    epochs: Option<usize>,

    /// Mini-batch size [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,

    /// Adam learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,

    /// Adam epsilon, added to the root of the second moment [default: 0.1]
    #[arg(long)]
    adam_epsilon: Option<f64>,

    /// Base seed; repeat i runs with seed+i [default: 0]
    #[arg(long)]
    seed: Option<u64>,

    /// Independent training repeats [default: 1]
    #[arg(long)]
    repeats: Option<usize>,

    /// Output directory for run artifacts [default: runs]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file to evaluate
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,

    /// Split to score: train, val, or test [default: test]
    #[arg(long)]
    split: Option<String>,

    /// Data source: `synthetic`, `directory`, or a corpus directory path [default: synthetic]
    #[arg(long)]
    dataset: Option<String>,

    /// Corpus root; implies `--dataset directory`
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,

    /// Samples per class for the synthetic corpus [default: 20]
    #[arg(long)]
    per_class: Option<usize>,

    /// Evaluation batch size [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,

    /// Split seed [default: the seed stored in the checkpoint]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Fragment to check, or `all` [default: all]
    #[arg(long)]
    module: Option<String>,

    /// Relative-error tolerance [default: 1e-4]
    #[arg(long)]
    tolerance: Option<f64>,

    /// Random instances per fragment [default: 20]
    #[arg(long)]
    instances: Option<usize>,

    /// Sampling seed [default: 53759]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: ModelDataArgs,

    /// Timed iterations, 30 minimum [default: 30]
    #[arg(long)]
    iterations: Option<usize>,

    /// Discarded warmup passes [default: 5]
    #[arg(long)]
    warmup: Option<usize>,

    /// Batch size for the throughput pass [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,

    /// Weight init seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SplitArgs {
    /// Data source: `synthetic`, `directory`, or a corpus directory path [default: synthetic]
    #[arg(long)]
    dataset: Option<String>,

    /// Corpus root; implies `--dataset directory`
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,

    /// Samples per class for the synthetic corpus [default: 20]
    #[arg(long)]
    per_class: Option<usize>,

    /// Shuffle seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,

    /// Manifest file to write [default: manifest.tsv]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to render the corpus into
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Number of classes, up to 4 [default: 3]
    #[arg(long)]
    classes: Option<usize>,

    /// Samples per class [default: 20]
    #[arg(long)]
    per_class: Option<usize>,

    /// Generation seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overlay = Overlay::load(cli.config.as_deref())?;
    match cli.command {
        Cmd::Train(args) => {
            let spec = TrainSpec {
                model: args.common.model(&overlay)?,
                data: args.common.data(&overlay)?,
                precision: args.common.precision(&overlay)?,
                sab_kernels: args.common.sab_kernels(&overlay)?,
                skips: args.common.skips(&overlay)?,
                out: overlay.resolve("out", args.out, PathBuf::from("runs"))?,
                config: TrainConfig {
                    lr: overlay.resolve("lr", args.lr, 0.01)?,
                    adam_epsilon: overlay.resolve("adam-epsilon", args.adam_epsilon, 0.1)?,
                    batch_size: overlay.resolve("batch-size", args.batch_size, 64)?,
                    epochs: overlay.resolve("epochs", args.epochs, 50)?,
                    seed: overlay.resolve("seed", args.seed, 0)?,
                    repeats: overlay.resolve("repeats", args.repeats, 1)?,
                    ..TrainConfig::default()
                },
            };
            cmd_train(&spec)
        }
        Cmd::Eval(args) => {
            let split_name = overlay.resolve("split", args.split, "test".to_string())?;
            let dataset: Option<String> = overlay.resolve_opt("dataset", args.dataset)?;
            let data_root = overlay.resolve_opt("data-root", args.data_root)?;
            let per_class = overlay.resolve("per-class", args.per_class, 20)?;
            let spec = EvalSpec {
                checkpoint: args.checkpoint,
                data: DataSpec::parse(dataset.as_deref(), data_root.as_deref(), 3, per_class)?,
                split: parse_split_name(&split_name)?,
                batch_size: overlay.resolve("batch-size", args.batch_size, 64)?,
                seed: overlay.resolve_opt("seed", args.seed)?,
            };
            cmd_eval(&spec)
        }
        Cmd::Gradcheck(args) => {
            // finite differences are certified in f64 regardless of --precision
            let spec = GradcheckSpec {
                module: overlay.resolve("module", args.module, "all".to_string())?,
                tolerance: overlay.resolve("tolerance", args.tolerance, 1e-4)?,
                instances: overlay.resolve("instances", args.instances, 20)?,
                seed: overlay.resolve("seed", args.seed, 0xd1ff)?,
            };
            cmd_gradcheck(&spec)
        }
        Cmd::Bench(args) => {
            let spec = BenchSpec {
                model: args.common.model(&overlay)?,
                data: args.common.data(&overlay)?,
                precision: args.common.precision(&overlay)?,
                sab_kernels: args.common.sab_kernels(&overlay)?,
                skips: args.common.skips(&overlay)?,
                iterations: overlay.resolve("iterations", args.iterations, 30)?,
                warmup: overlay.resolve("warmup", args.warmup, 5)?,
                batch_size: overlay.resolve("batch-size", args.batch_size, 64)?,
                seed: overlay.resolve("seed", args.seed, 0)?,
            };
            cmd_bench(&spec)
        }
        Cmd::Split(args) => {
            let dataset: Option<String> = overlay.resolve_opt("dataset", args.dataset)?;
            let data_root = overlay.resolve_opt("data-root", args.data_root)?;
            let per_class = overlay.resolve("per-class", args.per_class, 20)?;
            let spec = SplitSpec {
                data: DataSpec::parse(dataset.as_deref(), data_root.as_deref(), 3, per_class)?,
                seed: overlay.resolve("seed", args.seed, 0)?,
                out: overlay.resolve("out", args.out, PathBuf::from("manifest.tsv"))?,
            };
            cmd_split(&spec)
        }
        Cmd::Synth(args) => {
            let spec = SynthSpec {
                out: args.out,
                classes: overlay.resolve("classes", args.classes, 3)?,
                per_class: overlay.resolve("per-class", args.per_class, 20)?,
                seed: overlay.resolve("seed", args.seed, 0)?,
            };
            cmd_synth(&spec)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
