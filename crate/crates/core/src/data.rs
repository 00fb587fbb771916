//! Synthetic classification datasets and CSV feature files.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Samples of uniform shape with integer labels and split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub n_classes: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, n_classes: usize, features: Vec<f32>, labels: Vec<usize>, splits: Vec<Split>) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || n_classes == 0 {
            return Err(Error::Data("sample shape and class count must be positive".into()));
        }
        if labels.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        if features.len() != d * labels.len() || splits.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels, {} split tags, {} feature values for sample size {d}",
                labels.len(),
                splits.len(),
                features.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Dataset {
            sample_shape,
            n_classes,
            features,
            labels,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_size(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.sample_size();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Stacks the given samples into `[B, ...sample_shape]`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_size();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend(&self.sample_shape);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("non-empty batch"), labels)
    }

    /// Per-class mean sample.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let d = self.sample_size();
        let mut sums = vec![vec![0.0f64; d]; self.n_classes];
        let mut counts = vec![0usize; self.n_classes];
        for i in 0..self.len() {
            counts[self.labels[i]] += 1;
            for (s, &v) in sums[self.labels[i]].iter_mut().zip(self.sample(i)) {
                *s += v as f64;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        sums
    }
}

/// Fractions for train/val/test; test takes the remainder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.15 }
    }
}

fn assign_splits(n: usize, f: SplitFractions, rng: &mut ChaCha8Rng) -> Result<Vec<Split>> {
    if !(f.train > 0.0 && f.val >= 0.0 && f.train + f.val <= 1.0) {
        return Err(Error::Config(format!("invalid split fractions {f:?}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (n as f64 * f.train).round() as usize;
    let n_val = (n as f64 * f.val).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

/// Knobs for the sequence task: smooth per-class channel templates plus
/// Gaussian jitter and a random time shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceTask {
    pub n_classes: usize,
    pub n_samples: usize,
    pub length: usize,
    pub channels: usize,
    /// Std of additive per-element noise.
    pub jitter: f32,
    /// Largest random shift, in frames, either direction.
    pub max_shift: usize,
    /// Amplitude of the class templates relative to unit-scale jitter.
    pub separation: f32,
    #[serde(default)]
    pub splits: SplitFractions,
}

impl SequenceTask {
    pub fn new(n_classes: usize, n_samples: usize, length: usize, channels: usize) -> Self {
        SequenceTask {
            n_classes,
            n_samples,
            length,
            channels,
            jitter: 0.5,
            max_shift: length / 8,
            separation: 1.0,
            splits: SplitFractions::default(),
        }
    }
}

/// Smooth random curve sampled on `len` points.
fn smooth_template(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let comps: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            let freq = rng.gen_range(0.5f32..4.0);
            let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
            let amp = rng.gen_range(0.3f32..1.0);
            (freq, phase, amp)
        })
        .collect();
    (0..len)
        .map(|t| {
            let x = t as f32 / len as f32;
            comps.iter().map(|(f, p, a)| a * (std::f32::consts::TAU * f * x + p).sin()).sum()
        })
        .collect()
}

pub fn gen_sequence_classes(task: &SequenceTask, seed: u64) -> Result<Dataset> {
    let SequenceTask { n_classes, n_samples, length, channels, .. } = *task;
    if n_classes == 0 || n_samples == 0 || length == 0 || channels == 0 {
        return Err(Error::Config("sequence task parameters must be positive".into()));
    }
    if !(task.jitter >= 0.0) {
        return Err(Error::Config("jitter must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = length + 2 * task.max_shift;
    let templates: Vec<Vec<Vec<f32>>> = (0..n_classes)
        .map(|_| {
            (0..channels)
                .map(|_| smooth_template(span, &mut rng).into_iter().map(|v| v * task.separation).collect())
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0f32, task.jitter.max(f32::MIN_POSITIVE)).expect("finite std");
    let mut features = Vec::with_capacity(n_samples * channels * length);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = i % n_classes;
        let shift = rng.gen_range(0..=2 * task.max_shift);
        for ch in 0..channels {
            let src = &templates[label][ch][shift..shift + length];
            for &v in src {
                let e = if task.jitter > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                features.push(v + e);
            }
        }
        labels.push(label);
    }
    let splits = assign_splits(n_samples, task.splits, &mut rng)?;
    Dataset::new(vec![channels, length], n_classes, features, labels, splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageTask {
    pub n_classes: usize,
    pub n_samples: usize,
    pub hw: usize,
    pub channels: usize,
    pub jitter: f32,
    pub max_shift: usize,
    #[serde(default)]
    pub splits: SplitFractions,
}

/// Image surrogate: per-class smooth 2-D patterns, jitter, random shifts,
/// then dataset-wide normalization to zero mean and unit std.
pub fn gen_image_classes(task: &ImageTask, seed: u64) -> Result<Dataset> {
    let ImageTask { n_classes, n_samples, hw, channels, .. } = *task;
    if n_classes == 0 || n_samples == 0 || hw == 0 || channels == 0 {
        return Err(Error::Config("image task parameters must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = hw + 2 * task.max_shift;
    let templates: Vec<Vec<Vec<f32>>> = (0..n_classes)
        .map(|_| {
            (0..channels)
                .map(|_| {
                    let row = smooth_template(span, &mut rng);
                    let col = smooth_template(span, &mut rng);
                    let mut img = Vec::with_capacity(span * span);
                    for r in &row {
                        for c in &col {
                            img.push(r + c);
                        }
                    }
                    img
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0f32, task.jitter.max(f32::MIN_POSITIVE)).expect("finite std");
    let mut features = Vec::with_capacity(n_samples * channels * hw * hw);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = i % n_classes;
        let dy = rng.gen_range(0..=2 * task.max_shift);
        let dx = rng.gen_range(0..=2 * task.max_shift);
        for ch in 0..channels {
            let t = &templates[label][ch];
            for y in 0..hw {
                for x in 0..hw {
                    let e = if task.jitter > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    features.push(t[(y + dy) * span + x + dx] + e);
                }
            }
        }
        labels.push(label);
    }
    normalize(&mut features);
    let splits = assign_splits(n_samples, task.splits, &mut rng)?;
    Dataset::new(vec![channels, hw, hw], n_classes, features, labels, splits)
}

/// Zero mean, unit standard deviation over all values.
pub fn normalize(values: &mut [f32]) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    for v in values.iter_mut() {
        *v = ((*v as f64 - mean) * inv) as f32;
    }
}

/// Random horizontal flip plus a random crop of the image zero-padded by
/// `pad` pixels on each side. `img` is `[C, H, W]`.
pub fn augment_image(img: &mut [f32], c: usize, h: usize, w: usize, pad: usize, rng: &mut impl Rng) {
    let flip = rng.gen_bool(0.5);
    let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = y as isize + dy;
                let sx0 = x as isize + dx;
                let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
                img[(ch * h + y) * w + x] = v;
            }
        }
    }
}

/// Expected layout of a feature CSV: header `label,split,f0,...,f{D-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub sample_shape: Vec<usize>,
    pub n_classes: usize,
}

pub fn load_csv_features(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_csv_features(file, schema, path)
}

/// Parses feature CSV from any reader; `origin` labels error locations.
pub fn read_csv_features<R: Read>(reader: R, schema: &CsvSchema, origin: &Path) -> Result<Dataset> {
    let d: usize = schema.sample_shape.iter().product();
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    if d == 0 || schema.n_classes == 0 {
        return Err(Error::Config("CSV schema needs a positive sample shape and class count".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if header.len() != d + 2 {
        return Err(perr(
            1,
            format!("schema expects {} columns (label, split, {d} features), header has {}", d + 2, header.len()),
        ));
    }
    if &header[0] != "label" || &header[1] != "split" {
        return Err(perr(1, "header must start with 'label,split'".into()));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| perr(line, e.to_string()))?;
        if rec.len() != d + 2 {
            return Err(perr(line, format!("expected {} columns, found {}", d + 2, rec.len())));
        }
        let label: usize = rec[0].trim().parse().map_err(|_| perr(line, format!("bad label '{}'", &rec[0])))?;
        if label >= schema.n_classes {
            return Err(perr(line, format!("label {label} outside [0, {})", schema.n_classes)));
        }
        let split = Split::parse(rec[1].trim()).ok_or_else(|| perr(line, format!("bad split '{}'", &rec[1])))?;
        for (j, field) in rec.iter().skip(2).enumerate() {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| perr(line, format!("bad value '{field}' in column f{j}")))?;
            features.push(v);
        }
        labels.push(label);
        splits.push(split);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: empty dataset (no data rows)", origin.display())));
    }
    Dataset::new(schema.sample_shape.clone(), schema.n_classes, features, labels, splits)
}

pub fn write_csv_features<W: std::io::Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = data.sample_size();
    let mut header = vec!["label".to_string(), "split".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for i in 0..data.len() {
        let mut row = vec![data.labels[i].to_string(), data.splits[i].as_str().to_string()];
        row.extend(data.sample(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv_features(data: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_csv_features(data, std::fs::File::create(path)?)
}
