//! Dataset ingestion and preparation.
//!
//! Directory datasets hold one subdirectory per class; labels follow the
//! alphabetical order of class names and the mapping is written into the
//! split manifest. Images decode to grayscale in [0,1] (8-bit values divided
//! by 255), resize bilinearly, and stack into three identical channels.
//! Synthetic datasets generate small in-memory images with class-specific
//! bright blobs, separable enough for overfit smoke tests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const REAL_IMAGE_SIZE: usize = 256;
pub const SYNTH_IMAGE_SIZE: usize = 64;
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.70, 0.10, 0.20);

/// Grayscale raster with values already rescaled into [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("gray_image", "zero-dimension image"));
        }
        if pixels.len() != h * w {
            return Err(Error::shape("gray_image", "pixel count", h * w, pixels.len()));
        }
        Ok(GrayImage { h, w, pixels })
    }
}

#[derive(Debug, Clone)]
pub enum Source {
    /// Path relative to the dataset root.
    File(PathBuf),
    Memory(GrayImage),
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// Relative path for files, generated id for in-memory images.
    pub id: String,
    pub label: usize,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub seed: u64,
    pub fractions: (f64, f64, f64),
    /// Parallel to `Dataset::samples`.
    pub by_sample: Vec<Split>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: Option<PathBuf>,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub image_size: usize,
    pub split: Option<SplitAssignment>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "bmp", "jpg", "jpeg"];

/// Enumerate `root/<class>/<image>` with classes in alphabetical order and
/// samples in lexicographic path order.
pub fn load_directory(root: &Path) -> Result<Dataset> {
    let mut class_names = Vec::new();
    let entries = fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("cannot read dataset root {}: {e}", root.display())))?;
    for entry in entries {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            class_names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if class_names.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    class_names.sort();

    let mut samples = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} holds no images", dir.display())));
        }
        files.sort();
        for path in files {
            let rel = PathBuf::from(class).join(path.file_name().expect("file name"));
            samples.push(Sample {
                id: rel.to_string_lossy().into_owned(),
                label,
                source: Source::File(rel),
            });
        }
    }
    Ok(Dataset {
        root: Some(root.to_path_buf()),
        class_names,
        samples,
        image_size: REAL_IMAGE_SIZE,
        split: None,
    })
}

/// Like [`load_directory`] but demands a specific class set.
pub fn load_directory_expecting(root: &Path, expected: &[&str]) -> Result<Dataset> {
    let missing: Vec<&str> = expected
        .iter()
        .copied()
        .filter(|c| !root.join(c).is_dir())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "missing class directories under {}: expected {:?}, absent {:?}",
            root.display(),
            expected,
            missing
        )));
    }
    load_directory(root)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Per-class sample counts, in label order.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Indices belonging to one split, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        match &self.split {
            None => Vec::new(),
            Some(a) => (0..self.samples.len())
                .filter(|&i| a.by_sample[i] == split)
                .collect(),
        }
    }

    /// Decode a sample to grayscale [0,1].
    pub fn decode(&self, index: usize) -> Result<GrayImage> {
        let sample = &self.samples[index];
        match &sample.source {
            Source::Memory(img) => Ok(img.clone()),
            Source::File(rel) => {
                let root = self.root.as_ref().ok_or_else(|| {
                    Error::Dataset("file-backed sample in a dataset with no root".into())
                })?;
                decode_image(&root.join(rel))
            }
        }
    }

    /// Decode, resize, and stack one sample into a (3, S, S) tensor.
    pub fn record<T: Scalar>(&self, index: usize) -> Result<Tensor<T>> {
        preprocess(&self.decode(index)?, self.image_size)
    }

    /// Assemble a (B, 3, S, S) batch with its labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let s = self.image_size;
        let plane = 3 * s * s;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let rec = self.record::<T>(i)?;
            data.extend_from_slice(rec.data());
            labels.push(self.samples[i].label);
        }
        Ok((Tensor::nchw(indices.len(), 3, s, s, data)?, labels))
    }
}

fn decode_image(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::ImageRead {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::ImageRead {
            path: path.display().to_string(),
            msg: "zero-dimension image".into(),
        });
    }
    let pixels = match img {
        image::DynamicImage::ImageLuma8(g) => {
            g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
        }
        other => {
            // Rec. 601 luminance; the corpus is grayscale in substance
            let rgb = other.into_rgb8();
            rgb.pixels()
                .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
                .collect()
        }
    };
    GrayImage::new(h, w, pixels)
}

/// Bilinear resize with half-pixel centers, then replicate to 3 channels.
/// Values pass through unscaled; rescaling by 255 already happened when the
/// 8-bit source was decoded, which keeps this map idempotent.
pub fn preprocess<T: Scalar>(img: &GrayImage, target: usize) -> Result<Tensor<T>> {
    if target == 0 {
        return Err(Error::invalid("preprocess", "target size must be >= 1"));
    }
    let resized = resize_bilinear(img, target, target);
    let plane: Vec<T> = resized.pixels.iter().map(|&v| T::from_f64(v)).collect();
    let mut data = Vec::with_capacity(3 * target * target);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::nchw(1, 3, target, target, data).and_then(|t| t.reshaped(vec![3, target, target]))
}

/// Separable bilinear interpolation; source coordinates use half-pixel
/// centers (`src = (dst + 0.5) * scale - 0.5`) so equal sizes are identity.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    if img.h == out_h && img.w == out_w {
        return img.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let src = (d as f64 + 0.5) * scale - 0.5;
                let lo = src.floor().clamp(0.0, (n_in - 1) as f64);
                let frac = (src - lo).clamp(0.0, 1.0);
                let i0 = lo as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, frac)
            })
            .collect()
    };
    let rows = taps(img.h, out_h);
    let cols = taps(img.w, out_w);
    let mut out = vec![0.0f64; out_h * out_w];
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let p00 = img.pixels[y0 * img.w + x0];
            let p01 = img.pixels[y0 * img.w + x1];
            let p10 = img.pixels[y1 * img.w + x0];
            let p11 = img.pixels[y1 * img.w + x1];
            let top = p00 + (p01 - p00) * fx;
            let bot = p10 + (p11 - p10) * fx;
            out[oy * out_w + ox] = top + (bot - top) * fy;
        }
    }
    GrayImage { h: out_h, w: out_w, pixels: out }
}

/// Seeded uniform shuffle, then contiguous assignment: train and val counts
/// round to nearest, the remainder is test.
pub fn split(dataset: &mut Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<()> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 || ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::invalid("split", format!("fractions {fractions:?} must sum to 1")));
    }
    let n = dataset.samples.len();
    if n < 3 {
        return Err(Error::Dataset(format!("need at least 3 samples to split, have {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_train = (n as f64 * ft).round() as usize;
    let n_val = (n as f64 * fv).round() as usize;
    if n_train + n_val > n {
        return Err(Error::invalid("split", "rounded train+val exceed the sample count"));
    }
    let mut by_sample = vec![Split::Test; n];
    for &i in &order[..n_train] {
        by_sample[i] = Split::Train;
    }
    for &i in &order[n_train..n_train + n_val] {
        by_sample[i] = Split::Val;
    }
    dataset.split = Some(SplitAssignment { seed, fractions, by_sample });
    Ok(())
}

/// Render the split manifest: a header with seed, fractions, and per-class
/// counts, then one `<path>\t<label>\t<split>` line per sample.
pub fn manifest_text(dataset: &Dataset) -> Result<String> {
    let assignment = dataset
        .split
        .as_ref()
        .ok_or_else(|| Error::Dataset("dataset has no split assignment".into()))?;
    let mut s = String::new();
    let (ft, fv, fe) = assignment.fractions;
    s.push_str(&format!(
        "# seed={} fractions={:.2}/{:.2}/{:.2}\n",
        assignment.seed, ft, fv, fe
    ));
    for (label, (name, count)) in dataset
        .class_names
        .iter()
        .zip(dataset.class_histogram())
        .enumerate()
    {
        s.push_str(&format!("# class {label}={name} count={count}\n"));
    }
    for (sample, split) in dataset.samples.iter().zip(&assignment.by_sample) {
        s.push_str(&format!("{}\t{}\t{}\n", sample.id, sample.label, split));
    }
    Ok(s)
}

pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, manifest_text(dataset)?)?;
    Ok(())
}

/// Apply a previously written manifest to a freshly loaded dataset. Every
/// sample must appear exactly once with its original label.
pub fn apply_manifest(dataset: &mut Dataset, text: &str) -> Result<()> {
    let mut seed = 0u64;
    let mut fractions = SPLIT_FRACTIONS;
    let mut map: BTreeMap<&str, (usize, Split)> = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# seed=") {
            let mut parts = rest.split_whitespace();
            seed = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Dataset("manifest header seed unreadable".into()))?;
            if let Some(f) = parts.next().and_then(|p| p.strip_prefix("fractions=")) {
                let vals: Vec<f64> = f.split('/').filter_map(|v| v.parse().ok()).collect();
                if vals.len() == 3 {
                    fractions = (vals[0], vals[1], vals[2]);
                }
            }
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(id), Some(label), Some(split)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::Dataset(format!("malformed manifest line: {line:?}")));
        };
        let label: usize = label
            .parse()
            .map_err(|_| Error::Dataset(format!("bad label in manifest line: {line:?}")))?;
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::Dataset(format!("unknown split {other:?}"))),
        };
        map.insert(id, (label, split));
    }
    if map.len() != dataset.samples.len() {
        return Err(Error::Dataset(format!(
            "manifest lists {} samples, dataset has {}",
            map.len(),
            dataset.samples.len()
        )));
    }
    let mut by_sample = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let Some(&(label, split)) = map.get(sample.id.as_str()) else {
            return Err(Error::Dataset(format!("sample {} missing from manifest", sample.id)));
        };
        if label != sample.label {
            return Err(Error::Dataset(format!(
                "sample {}: manifest label {label} != dataset label {}",
                sample.id, sample.label
            )));
        }
        by_sample.push(split);
    }
    dataset.split = Some(SplitAssignment { seed, fractions, by_sample });
    Ok(())
}

/// Small in-memory dataset: class k holds a bright Gaussian blob at a
/// class-specific location over seeded background noise.
pub fn synth_dataset(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::Dataset("per_class must be >= 1".into()));
    }
    if classes == 0 || classes > 4 {
        return Err(Error::Dataset("synthetic generator supports 1..=4 classes".into()));
    }
    let s = SYNTH_IMAGE_SIZE;
    let centers = [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)];
    let sigma = s as f64 / 8.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(classes * per_class);
    for label in 0..classes {
        let (cy, cx) = centers[label];
        let (cy, cx) = (cy * s as f64, cx * s as f64);
        for i in 0..per_class {
            let jitter_y = rng.gen_range(-2.0..2.0);
            let jitter_x = rng.gen_range(-2.0..2.0);
            let mut pixels = vec![0.0f64; s * s];
            for y in 0..s {
                for x in 0..s {
                    let dy = y as f64 - cy - jitter_y;
                    let dx = x as f64 - cx - jitter_x;
                    let blob = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                    let noise = rng.gen_range(0.0..0.15);
                    pixels[y * s + x] = (0.8 * blob + noise).clamp(0.0, 1.0);
                }
            }
            samples.push(Sample {
                id: format!("synth/class{label}/{i:03}"),
                label,
                source: Source::Memory(GrayImage { h: s, w: s, pixels }),
            });
        }
    }
    Ok(Dataset {
        root: None,
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        samples,
        image_size: s,
        split: None,
    })
}
