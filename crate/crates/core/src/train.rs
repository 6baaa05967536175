//! Adam optimization, the training loop, evaluation, and inference timing.
//!
//! Runs are deterministic for a given seed: weight init, per-epoch shuffle
//! order, and batch assembly all derive from it, so repeated runs produce
//! byte-identical checkpoints and metric files. A repeat sweep trains with
//! seeds `seed..seed+repeats` and reports the best run alongside the mean
//! and spread of the individual bests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::CheckpointMeta;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_ADAM_EPSILON: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_EPOCHS: usize = 50;

/// Distinct stream for shuffle order so it never collides with weight init.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            adam_epsilon: DEFAULT_ADAM_EPSILON,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            repeats: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("train_config", format!("lr {} must be positive", self.lr)));
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return Err(Error::invalid("train_config", "adam epsilon must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid("train_config", format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.repeats == 0 {
            return Err(Error::invalid(
                "train_config",
                "batch_size, epochs, and repeats must all be >= 1",
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter, kept in f64
/// regardless of the model's element width.
#[derive(Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over every parameter. Moments update as
/// `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`; after bias correction the
/// parameter moves by `-lr * m_hat / (sqrt(v_hat) + eps)`, with epsilon added
/// to the root rather than under it.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState,
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    config: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for (name, param) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::invalid("adam_step", format!("no gradient for {name}")))?;
        if grad.len() != param.len() {
            return Err(Error::shape("adam_step", "gradient length", param.len(), grad.len()));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
        if m.len() != param.len() {
            return Err(Error::shape("adam_step", "moment length", param.len(), m.len()));
        }
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..p.len() {
            let gi = g[i].as_f64();
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            let next = p[i].as_f64() - config.lr * m_hat / (v_hat.sqrt() + config.adam_epsilon);
            p[i] = T::from_f64(next);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// A completed training run: its per-epoch curve and the weights from the
/// best epoch.
#[derive(Debug, Clone)]
pub struct RunResult<T: Scalar> {
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub model: Model<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FailedRun {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

#[derive(Debug)]
pub enum RunOutcome<T: Scalar> {
    Completed(RunResult<T>),
    Diverged(FailedRun),
}

#[derive(Debug)]
pub struct TrainSummary<T: Scalar> {
    pub runs: Vec<RunOutcome<T>>,
}

impl<T: Scalar> TrainSummary<T> {
    pub fn completed(&self) -> impl Iterator<Item = &RunResult<T>> {
        self.runs.iter().filter_map(|r| match r {
            RunOutcome::Completed(run) => Some(run),
            RunOutcome::Diverged(_) => None,
        })
    }

    pub fn failed(&self) -> impl Iterator<Item = &FailedRun> + '_ {
        self.runs.iter().filter_map(|r| match r {
            RunOutcome::Completed(_) => None,
            RunOutcome::Diverged(f) => Some(f),
        })
    }

    /// Best completed run: highest val accuracy, ties to lower val loss,
    /// then to the earlier seed. Errors when every run diverged.
    pub fn best(&self) -> Result<&RunResult<T>> {
        self.completed()
            .min_by(|a, b| {
                b.best_val_accuracy
                    .total_cmp(&a.best_val_accuracy)
                    .then(a.best_val_loss.total_cmp(&b.best_val_loss))
                    .then(a.seed.cmp(&b.seed))
            })
            .ok_or_else(|| {
                let first = self.failed().next().expect("no completed and no failed runs");
                Error::Diverged { epoch: first.epoch, step: first.step }
            })
    }

    /// Mean and population spread of the best val accuracy across completed
    /// runs.
    pub fn accuracy_mean_std(&self) -> (f64, f64) {
        let accs: Vec<f64> = self.completed().map(|r| r.best_val_accuracy).collect();
        if accs.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        (mean, var.sqrt())
    }
}

/// Train `repeats` runs with seeds `config.seed + i`. Divergence in one run
/// is recorded and the sweep continues with the next seed.
pub fn train<T: Scalar>(
    graph: &LayerGraph,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainSummary<T>> {
    config.validate()?;
    let train_idx = dataset.indices(Split::Train);
    let val_idx = dataset.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Dataset(
            "training needs non-empty train and val splits; run split() first".into(),
        ));
    }
    if dataset.class_count() != graph.class_count {
        return Err(Error::shape(
            "train",
            "class count",
            graph.class_count,
            dataset.class_count(),
        ));
    }
    let mut runs = Vec::with_capacity(config.repeats);
    for i in 0..config.repeats {
        let seed = config.seed + i as u64;
        runs.push(train_one::<T>(graph, dataset, config, seed, &train_idx)?);
    }
    Ok(TrainSummary { runs })
}

fn train_one<T: Scalar>(
    graph: &LayerGraph,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
    train_idx: &[usize],
) -> Result<RunOutcome<T>> {
    let mut model = Model::<T>::init(graph.clone(), seed)?;
    let mut adam = AdamState::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = train_idx.to_vec();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, f64, BTreeMap<String, Tensor<T>>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let (input, labels) = dataset.batch::<T>(batch_idx)?;
            let (loss, _, grads) = match model.loss_and_grads(&input, &labels) {
                Ok(out) => out,
                // overflow trips the kernels' finiteness guards mid-pass
                Err(Error::NonFinite { .. }) => {
                    return Ok(RunOutcome::Diverged(FailedRun { seed, epoch, step }))
                }
                Err(e) => return Err(e),
            };
            let loss = loss.as_f64();
            if !loss.is_finite() || !grads.all_finite() {
                return Ok(RunOutcome::Diverged(FailedRun { seed, epoch, step }));
            }
            adam_step(&mut adam, &mut model.params, &grads.into_params(), config)?;
            if model.params.values().any(|p| !p.all_finite()) {
                return Ok(RunOutcome::Diverged(FailedRun { seed, epoch, step }));
            }
            // partial final batch: loss is already the mean over its size
            loss_sum += loss * batch_idx.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val = evaluate(&model, dataset, Split::Val, config.batch_size)?;
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss: val.mean_loss,
            val_accuracy: val.accuracy,
        });
        let better = match &best {
            None => true,
            Some((_, acc, loss, _)) => {
                val.accuracy > *acc || (val.accuracy == *acc && val.mean_loss < *loss)
            }
        };
        if better {
            best = Some((epoch, val.accuracy, val.mean_loss, model.params.clone()));
        }
    }

    let (best_epoch, best_val_accuracy, best_val_loss, params) = best.expect("epochs >= 1");
    Ok(RunOutcome::Completed(RunResult {
        seed,
        epochs,
        best_epoch,
        best_val_accuracy,
        best_val_loss,
        model: Model::from_parts(graph.clone(), params)?,
    }))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// confusion[true_label][predicted_label]
    pub confusion: Vec<Vec<usize>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub total: usize,
}

impl Evaluation {
    pub fn text_table(&self, class_names: &[String]) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "accuracy {:.4} over {} samples, mean loss {:.6}\n",
            self.accuracy, self.total, self.mean_loss
        ));
        s.push_str("true\\pred");
        for name in class_names {
            s.push_str(&format!("\t{name}"));
        }
        s.push_str("\tprecision\trecall\n");
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&class_names[i]);
            for &c in row {
                s.push_str(&format!("\t{c}"));
            }
            s.push_str(&format!("\t{:.4}\t{:.4}\n", self.precision[i], self.recall[i]));
        }
        s
    }
}

/// Run the model over one split and tally a confusion matrix. Per-class
/// precision and recall are 0 when their denominator is empty.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<Evaluation> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::Dataset(format!("split {split} is empty; nothing to evaluate")));
    }
    if batch_size == 0 {
        return Err(Error::invalid("evaluate", "batch_size must be >= 1"));
    }
    let classes = model.graph.class_count;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(batch_size) {
        let (input, labels) = dataset.batch::<T>(chunk)?;
        let mut pass = model.forward(&input)?;
        let (loss, probs) = pass.tape.cross_entropy(pass.logits, &labels)?;
        loss_sum += pass.tape.value(loss).item().as_f64() * chunk.len() as f64;
        for (row, &label) in labels.iter().enumerate() {
            let p = &probs.data()[row * classes..(row + 1) * classes];
            let pred = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.as_f64().total_cmp(&b.1.as_f64()))
                .map(|(i, _)| i)
                .expect("classes >= 1");
            confusion[label][pred] += 1;
        }
    }
    let total = indices.len();
    let correct: usize = (0..classes).map(|i| confusion[i][i]).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision: Vec<f64> = (0..classes)
        .map(|p| ratio(confusion[p][p], (0..classes).map(|t| confusion[t][p]).sum()))
        .collect();
    let recall: Vec<f64> = (0..classes)
        .map(|t| ratio(confusion[t][t], confusion[t].iter().sum()))
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / total as f64,
        mean_loss: loss_sum / total as f64,
        confusion,
        precision,
        recall,
        total,
    })
}

/// Per-epoch curve as CSV, one row per epoch.
pub fn metrics_csv<T: Scalar>(run: &RunResult<T>) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for e in &run.epochs {
        s.push_str(&format!(
            "{},{:.9},{:.9},{:.6}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        ));
    }
    s
}

/// Key-value run report. Carries no timestamps so reruns are byte-identical.
pub fn report_text<T: Scalar>(run: &RunResult<T>, config: &TrainConfig) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("seed", run.seed.to_string()),
        ("parameters", run.model.param_count().to_string()),
        ("epochs", config.epochs.to_string()),
        ("batch_size", config.batch_size.to_string()),
        ("lr", format!("{}", config.lr)),
        ("adam_epsilon", format!("{}", config.adam_epsilon)),
        ("best_epoch", run.best_epoch.to_string()),
        ("best_val_accuracy", format!("{:.6}", run.best_val_accuracy)),
        ("best_val_loss", format!("{:.9}", run.best_val_loss)),
    ] {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}

/// Write `checkpoint.l2sa`, `metrics.csv`, and `report.txt` under `dir`.
pub fn persist_run<T: Scalar>(run: &RunResult<T>, config: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("val_accuracy".into(), run.best_val_accuracy);
    metrics.insert("val_loss".into(), run.best_val_loss);
    let meta = CheckpointMeta { epoch: run.best_epoch as u64, seed: run.seed, metrics };
    run.model.save(&dir.join("checkpoint.l2sa"), &meta)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(run))?;
    fs::write(dir.join("report.txt"), report_text(run, config))?;
    Ok(())
}

/// Lay out `base/<name>/seed<k>/...` for every completed run plus a sweep
/// summary file.
pub fn persist_summary<T: Scalar>(
    summary: &TrainSummary<T>,
    config: &TrainConfig,
    base: &Path,
    name: &str,
) -> Result<()> {
    let root = base.join(name);
    for run in summary.completed() {
        persist_run(run, config, &root.join(format!("seed{}", run.seed)))?;
    }
    let mut s = String::new();
    let (mean, std) = summary.accuracy_mean_std();
    if let Ok(best) = summary.best() {
        s.push_str(&format!("best_seed={}\n", best.seed));
        s.push_str(&format!("best_val_accuracy={:.6}\n", best.best_val_accuracy));
    }
    s.push_str(&format!("runs_completed={}\n", summary.completed().count()));
    s.push_str(&format!("val_accuracy_mean={mean:.6}\nval_accuracy_std={std:.6}\n"));
    for f in summary.failed() {
        s.push_str(&format!("diverged seed={} epoch={} step={}\n", f.seed, f.epoch, f.step));
    }
    fs::create_dir_all(&root)?;
    fs::write(root.join("summary.txt"), s)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub single_ms_median: f64,
    pub single_ms_p95: f64,
    pub batch_images_per_sec: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub param_count: usize,
    pub hardware: String,
}

impl BenchmarkReport {
    pub fn text(&self) -> String {
        format!(
            "hardware={}\nparameters={}\niterations={} (warmup {} excluded)\n\
             single_image_ms_median={:.3}\nsingle_image_ms_p95={:.3}\n\
             batch{}_images_per_sec={:.1}\n",
            self.hardware,
            self.param_count,
            self.iterations,
            self.warmup,
            self.single_ms_median,
            self.single_ms_p95,
            self.batch_size,
            self.batch_images_per_sec,
        )
    }
}

/// Time forward passes on synthetic input: single-image latency (median and
/// p95 over `iterations`, after `warmup` discarded passes) and throughput on
/// one full batch.
pub fn benchmark_inference<T: Scalar>(
    model: &Model<T>,
    iterations: usize,
    warmup: usize,
    batch_size: usize,
) -> Result<BenchmarkReport> {
    if iterations < 30 {
        return Err(Error::invalid("benchmark", "need at least 30 timed iterations"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("benchmark", "batch_size must be >= 1"));
    }
    let (c, h, w) = model.graph.input;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let single = Tensor::from_fn(&[1, c, h, w], |_| {
        T::from_f64(rand::Rng::gen_range(&mut rng, 0.0..1.0))
    });
    for _ in 0..warmup {
        model.logits(&single)?;
    }
    let mut times_ms = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        model.logits(&single)?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times_ms.sort_by(f64::total_cmp);
    let pick = |q: f64| times_ms[((times_ms.len() - 1) as f64 * q).round() as usize];

    let batch = Tensor::from_fn(&[batch_size, c, h, w], |_| {
        T::from_f64(rand::Rng::gen_range(&mut rng, 0.0..1.0))
    });
    let start = Instant::now();
    model.logits(&batch)?;
    let batch_secs = start.elapsed().as_secs_f64();

    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    Ok(BenchmarkReport {
        single_ms_median: pick(0.5),
        single_ms_p95: pick(0.95),
        batch_images_per_sec: batch_size as f64 / batch_secs,
        batch_size,
        iterations,
        warmup,
        param_count: model.param_count(),
        hardware: format!(
            "{}-{} ({} threads, single-threaded compute)",
            std::env::consts::ARCH,
            std::env::consts::OS,
            threads
        ),
    })
}
