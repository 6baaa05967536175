//! The six subcommand implementations.

use std::path::{Path, PathBuf};

use l2sa_core::checkpoint::checkpoint_width;
use l2sa_core::data::{self, Dataset, Split, SPLIT_FRACTIONS};
use l2sa_core::gradcheck::{grad_check, standard_fragments, GradCheckSettings};
use l2sa_core::graph::{
    build_baseline_cbam_shaped, build_baseline_shaped, build_l2sa_shaped, build_vgg16_star,
    BackboneShape, LayerGraph, DEFAULT_CBAM_KERNEL,
};
use l2sa_core::model::Model;
use l2sa_core::train::{
    self, benchmark_inference, evaluate, persist_summary, TrainConfig, TrainSummary,
};
use l2sa_core::{ElemWidth, Error, Scalar};

use crate::config::{usage, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Baseline,
    L2sa,
    L2saNoskip,
    BaselineCbam,
    Vgg16Star,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "l2sa" => Ok(ModelKind::L2sa),
            "l2sa_noskip" => Ok(ModelKind::L2saNoskip),
            "baseline_cbam" => Ok(ModelKind::BaselineCbam),
            "vgg16_star" => Ok(ModelKind::Vgg16Star),
            other => Err(usage(format!(
                "--model: unknown model {other:?} (expected baseline, l2sa, l2sa_noskip, \
                 baseline_cbam, or vgg16_star)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::L2sa => "l2sa",
            ModelKind::L2saNoskip => "l2sa_noskip",
            ModelKind::BaselineCbam => "baseline_cbam",
            ModelKind::Vgg16Star => "vgg16_star",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(usage(format!("--precision: expected f32 or f64, got {other:?}"))),
        }
    }
}

pub fn parse_split_name(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(usage(format!("--split: expected train, val, or test, got {other:?}"))),
    }
}

pub fn parse_kernels(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("--sab-kernels: expected a comma list of sizes, got {s:?}")))
}

#[derive(Clone, Debug)]
pub enum DataSpec {
    Synthetic { classes: usize, per_class: usize },
    Directory(PathBuf),
}

impl DataSpec {
    /// `synthetic`, `directory` (with a root), or a directory path outright.
    /// A bare `--data-root` implies directory mode; with no flags at all the
    /// synthetic corpus is used.
    pub fn parse(
        dataset: Option<&str>,
        data_root: Option<&Path>,
        classes: usize,
        per_class: usize,
    ) -> Result<Self, CliError> {
        match dataset {
            None => match data_root {
                Some(root) => Ok(DataSpec::Directory(root.to_path_buf())),
                None => Ok(DataSpec::Synthetic { classes, per_class }),
            },
            Some("synthetic") => {
                if data_root.is_some() {
                    return Err(usage("--data-root conflicts with --dataset synthetic"));
                }
                Ok(DataSpec::Synthetic { classes, per_class })
            }
            Some("directory") => {
                let root = data_root
                    .ok_or_else(|| usage("--data-root is required with --dataset directory"))?;
                Ok(DataSpec::Directory(root.to_path_buf()))
            }
            Some(other) if Path::new(other).is_dir() => {
                if data_root.is_some() {
                    return Err(usage("--data-root conflicts with a directory path in --dataset"));
                }
                Ok(DataSpec::Directory(PathBuf::from(other)))
            }
            Some(other) => Err(usage(format!(
                "--dataset: expected synthetic, directory, or an existing directory path, \
                 got {other:?}"
            ))),
        }
    }

    fn load(&self, seed: u64) -> Result<Dataset, Error> {
        match self {
            DataSpec::Synthetic { classes, per_class } => {
                data::synth_dataset(*classes, *per_class, seed)
            }
            DataSpec::Directory(root) => data::load_directory(root),
        }
    }

    /// Synthetic runs use the shrunken backbone; a real corpus gets the
    /// full-size one.
    fn backbone(&self) -> BackboneShape {
        match self {
            DataSpec::Synthetic { .. } => BackboneShape::compact(),
            DataSpec::Directory(_) => BackboneShape::default(),
        }
    }
}

pub fn build_graph(
    kind: ModelKind,
    input: (usize, usize, usize),
    classes: usize,
    sab_kernels: &[usize],
    skips: bool,
    shape: &BackboneShape,
) -> Result<LayerGraph, Error> {
    match kind {
        ModelKind::Baseline => Ok(build_baseline_shaped(input, classes, shape)),
        ModelKind::L2sa => build_l2sa_shaped(input, classes, sab_kernels, skips, shape),
        ModelKind::L2saNoskip => build_l2sa_shaped(input, classes, sab_kernels, false, shape),
        ModelKind::BaselineCbam => {
            Ok(build_baseline_cbam_shaped(input, classes, DEFAULT_CBAM_KERNEL, shape))
        }
        ModelKind::Vgg16Star => Ok(build_vgg16_star(input, classes)),
    }
}

pub struct TrainSpec {
    pub model: ModelKind,
    pub data: DataSpec,
    pub precision: Precision,
    pub sab_kernels: Vec<usize>,
    pub skips: bool,
    pub out: PathBuf,
    pub config: TrainConfig,
}

pub fn cmd_train(spec: &TrainSpec) -> Result<(), CliError> {
    let mut ds = spec.data.load(spec.config.seed)?;
    data::split(&mut ds, SPLIT_FRACTIONS, spec.config.seed)?;
    let input = (3, ds.image_size, ds.image_size);
    let graph = build_graph(
        spec.model,
        input,
        ds.class_count(),
        &spec.sab_kernels,
        spec.skips,
        &spec.data.backbone(),
    )?;
    println!(
        "training {} ({} parameters) on {} samples, {} epochs x {} repeat(s)",
        spec.model.name(),
        graph.count_parameters(),
        ds.len(),
        spec.config.epochs,
        spec.config.repeats
    );
    match spec.precision {
        Precision::F32 => run_train::<f32>(spec, &graph, &ds),
        Precision::F64 => run_train::<f64>(spec, &graph, &ds),
    }
}

fn run_train<T: Scalar>(
    spec: &TrainSpec,
    graph: &LayerGraph,
    ds: &Dataset,
) -> Result<(), CliError> {
    let summary: TrainSummary<T> = train::train(graph, ds, &spec.config)?;
    let name = spec.model.name();
    persist_summary(&summary, &spec.config, &spec.out, name)?;
    data::write_manifest(ds, &spec.out.join(name).join("manifest.tsv"))?;
    print_summary(&summary, &spec.out.join(name));
    Ok(())
}

fn print_summary<T: Scalar>(summary: &TrainSummary<T>, dir: &Path) {
    for run in summary.completed() {
        println!(
            "seed {}: best epoch {} val accuracy {:.4} val loss {:.6}",
            run.seed, run.best_epoch, run.best_val_accuracy, run.best_val_loss
        );
    }
    for f in summary.failed() {
        println!("seed {}: diverged at epoch {} step {}", f.seed, f.epoch, f.step);
    }
    let (mean, std) = summary.accuracy_mean_std();
    match summary.best() {
        Ok(best) => println!(
            "best seed {} accuracy {:.4}; mean {:.4} +- {:.4}; artifacts in {}",
            best.seed,
            best.best_val_accuracy,
            mean,
            std,
            dir.display()
        ),
        Err(e) => println!("no run completed: {e}"),
    }
}

pub struct EvalSpec {
    pub checkpoint: PathBuf,
    pub data: DataSpec,
    pub split: Split,
    pub batch_size: usize,
    /// Split seed; defaults to the seed stored in the checkpoint.
    pub seed: Option<u64>,
}

pub fn cmd_eval(spec: &EvalSpec) -> Result<(), CliError> {
    if !spec.checkpoint.exists() {
        return Err(CliError::Run(Error::Checkpoint(format!(
            "no such checkpoint: {}",
            spec.checkpoint.display()
        ))));
    }
    match checkpoint_width(&spec.checkpoint)? {
        ElemWidth::F32 => run_eval::<f32>(spec),
        ElemWidth::F64 => run_eval::<f64>(spec),
    }
}

fn run_eval<T: Scalar>(spec: &EvalSpec) -> Result<(), CliError> {
    let (model, meta) = Model::<T>::load(&spec.checkpoint)?;
    let seed = spec.seed.unwrap_or(meta.seed);
    let mut ds = spec.data.load(seed)?;
    data::split(&mut ds, SPLIT_FRACTIONS, seed)?;
    let eval = evaluate(&model, &ds, spec.split, spec.batch_size)?;
    println!(
        "checkpoint {} (epoch {}, seed {}), {} split, split seed {seed}",
        spec.checkpoint.display(),
        meta.epoch,
        meta.seed,
        spec.split
    );
    print!("{}", eval.text_table(&ds.class_names));
    Ok(())
}

pub struct GradcheckSpec {
    pub module: String,
    pub tolerance: f64,
    pub instances: usize,
    pub seed: u64,
}

pub fn cmd_gradcheck(spec: &GradcheckSpec) -> Result<(), CliError> {
    let fragments = standard_fragments();
    let selected: Vec<_> = if spec.module == "all" {
        fragments.iter().collect()
    } else {
        let found: Vec<_> = fragments.iter().filter(|f| f.name == spec.module).collect();
        if found.is_empty() {
            let names: Vec<&str> = fragments.iter().map(|f| f.name).collect();
            return Err(usage(format!(
                "--module: unknown fragment {:?} (available: all, {})",
                spec.module,
                names.join(", ")
            )));
        }
        found
    };
    let settings = GradCheckSettings {
        tolerance: spec.tolerance,
        instances: spec.instances,
        seed: spec.seed,
        ..GradCheckSettings::default()
    };
    println!(
        "finite-difference certification in f64: tolerance {:.1e}, {} instances per fragment",
        settings.tolerance, settings.instances
    );
    let mut failures = 0usize;
    for fragment in selected {
        let report = grad_check(fragment, &settings)?;
        let verdict = if report.passed() { "pass" } else { "FAIL" };
        println!(
            "{:24} {} max_rel_err {:.3e} ({} instances, {} excluded)",
            report.fragment,
            verdict,
            report.worst(),
            report.instances_checked,
            report.instances_excluded
        );
        if !report.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Run(Error::NonFinite {
            op: "gradcheck",
            what: "gradient mismatch",
        }));
    }
    Ok(())
}

pub struct BenchSpec {
    pub model: ModelKind,
    pub data: DataSpec,
    pub precision: Precision,
    pub iterations: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sab_kernels: Vec<usize>,
    pub skips: bool,
}

pub fn cmd_bench(spec: &BenchSpec) -> Result<(), CliError> {
    let size = match &spec.data {
        DataSpec::Synthetic { .. } => data::SYNTH_IMAGE_SIZE,
        DataSpec::Directory(_) => data::REAL_IMAGE_SIZE,
    };
    let graph = build_graph(
        spec.model,
        (3, size, size),
        3,
        &spec.sab_kernels,
        spec.skips,
        &spec.data.backbone(),
    )?;
    println!("timing {} on {}x{} input", spec.model.name(), size, size);
    let report = match spec.precision {
        Precision::F32 => {
            benchmark_inference(&Model::<f32>::init(graph, spec.seed)?, spec.iterations, spec.warmup, spec.batch_size)?
        }
        Precision::F64 => {
            benchmark_inference(&Model::<f64>::init(graph, spec.seed)?, spec.iterations, spec.warmup, spec.batch_size)?
        }
    };
    print!("{}", report.text());
    Ok(())
}

pub struct SplitSpec {
    pub data: DataSpec,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_split(spec: &SplitSpec) -> Result<(), CliError> {
    let mut ds = spec.data.load(spec.seed)?;
    data::split(&mut ds, SPLIT_FRACTIONS, spec.seed)?;
    data::write_manifest(&ds, &spec.out)?;
    let count = |s: Split| ds.indices(s).len();
    println!(
        "{} samples -> train {} / val {} / test {} (seed {}); manifest at {}",
        ds.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        spec.seed,
        spec.out.display()
    );
    for (label, (name, n)) in ds.class_names.iter().zip(ds.class_histogram()).enumerate() {
        println!("class {label} {name}: {n}");
    }
    Ok(())
}

pub struct SynthSpec {
    pub out: PathBuf,
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

/// Render the synthetic corpus as 8-bit grayscale PNGs in the directory
/// layout the loader expects.
pub fn cmd_synth(spec: &SynthSpec) -> Result<(), CliError> {
    let ds = data::synth_dataset(spec.classes, spec.per_class, spec.seed)?;
    let mut counters = vec![0usize; ds.class_count()];
    for (i, sample) in ds.samples.iter().enumerate() {
        let gray = ds.decode(i)?;
        let bytes: Vec<u8> = gray
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::GrayImage::from_raw(gray.w as u32, gray.h as u32, bytes)
            .expect("pixel count matches dimensions");
        let dir = spec.out.join(&ds.class_names[sample.label]);
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
        let n = counters[sample.label];
        counters[sample.label] += 1;
        let file = dir.join(format!("{n:04}.png"));
        img.save(&file).map_err(|e| {
            CliError::Run(Error::ImageRead { path: file.display().to_string(), msg: e.to_string() })
        })?;
    }
    println!(
        "wrote {} images ({} classes x {}) under {}",
        ds.len(),
        spec.classes,
        spec.per_class,
        spec.out.display()
    );
    Ok(())
}
