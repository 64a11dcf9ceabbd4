//! Datasets: CSV and IDX loaders, feature standardization and synthetic
//! generators used when the real data files are not available.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;
pub const MNIST_DIM: usize = 784;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Single target column holding −1 or +1.
    PmOne,
    /// One column per class, exactly one 1 per row.
    OneHot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub targets: Tensor,
    pub encoding: Encoding,
}

impl Dataset {
    pub fn new(features: Tensor, targets: Tensor, encoding: Encoding) -> Result<Self> {
        let (n, _) = features.dims2()?;
        let (nt, c) = targets.dims2()?;
        if n != nt {
            return Err(Error::Shape(format!("{n} feature rows but {nt} target rows")));
        }
        let ok = match encoding {
            Encoding::PmOne => c == 1 && targets.data().iter().all(|&t| t == 1.0 || t == -1.0),
            Encoding::OneHot => targets.data().chunks(c.max(1)).all(|row| {
                row.iter().all(|&v| v == 0.0 || v == 1.0) && row.iter().filter(|&&v| v == 1.0).count() == 1
            }),
        };
        if !ok {
            return Err(Error::Shape(format!("targets are not valid {encoding:?}")));
        }
        Ok(Self {
            features,
            targets,
            encoding,
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.targets.shape()[1]
    }

    /// Rows `[start, end)` as a training batch.
    pub fn batch(&self, start: usize, end: usize) -> Batch {
        Batch {
            x: self.features.rows(start, end),
            y: self.targets.rows(start, end),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            features: self.features.rows(start, end),
            targets: self.targets.rows(start, end),
            encoding: self.encoding,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            targets: self.targets.select_rows(idx),
            encoding: self.encoding,
        }
    }

    /// Concatenates datasets with equal width and encoding.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::DatasetTooSmall("nothing to concatenate".into()))?;
        let (d, c) = (first.dim(), first.classes());
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.dim() != d || p.classes() != c || p.encoding != first.encoding {
                return Err(Error::Shape("cannot concatenate datasets of different shape".into()));
            }
            x.extend_from_slice(p.features.data());
            y.extend_from_slice(p.targets.data());
            n += p.len();
        }
        Ok(Dataset {
            features: Tensor::new(vec![n, d], x)?,
            targets: Tensor::new(vec![n, c], y)?,
            encoding: first.encoding,
        })
    }

    /// Converts ±1 targets into two-class one-hot (−1 → class 0, +1 → class 1).
    pub fn to_one_hot(&self) -> Dataset {
        if self.encoding == Encoding::OneHot {
            return self.clone();
        }
        let y = self
            .targets
            .data()
            .iter()
            .flat_map(|&t| if t > 0.0 { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        Dataset {
            features: self.features.clone(),
            targets: Tensor::new(vec![self.len(), 2], y).expect("two columns per row"),
            encoding: Encoding::OneHot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CsvOptions {
    pub skip_header: bool,
}

/// Loads comma-separated numeric rows. The label column is removed from the
/// features; `{0, 1}` labels map to `{−1, +1}` under [`Encoding::PmOne`]
/// (an explicit `−1` is also accepted), and non-negative integer labels map
/// to one-hot columns under [`Encoding::OneHot`].
pub fn load_csv(path: impl AsRef<Path>, label_column: usize, mode: Encoding, opts: CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.skip_header)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut features = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut width = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let values: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(line, format!("not a number: {f:?}"))))
            .collect::<Result<_>>()?;
        if label_column >= values.len() {
            return Err(parse_err(line, format!("label column {label_column} out of range for {} fields", values.len())));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(line, format!("expected {w} fields, found {}", values.len())));
            }
            _ => {}
        }
        let label = values[label_column];
        if !label.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(line, "non-finite value".into()));
        }
        match mode {
            Encoding::PmOne => {
                let t = if label == 1.0 {
                    1.0
                } else if label == 0.0 || label == -1.0 {
                    -1.0
                } else {
                    return Err(parse_err(line, format!("label {label} is not binary")));
                };
                labels.push(t);
            }
            Encoding::OneHot => {
                if label < 0.0 || label.fract() != 0.0 {
                    return Err(parse_err(line, format!("label {label} is not a class index")));
                }
                labels.push(label);
            }
        }
        features.extend(values.iter().enumerate().filter(|(i, _)| *i != label_column).map(|(_, v)| *v));
    }
    let Some(width) = width else {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no data rows".into(),
        });
    };
    let n = labels.len();
    let features = Tensor::new(vec![n, width - 1], features)?;
    match mode {
        Encoding::PmOne => Dataset::new(features, Tensor::new(vec![n, 1], labels)?, mode),
        Encoding::OneHot => {
            let classes = labels.iter().fold(1.0f64, |m, &l| m.max(l)) as usize + 1;
            Dataset::new(features, one_hot(labels.iter().map(|&l| l as usize), n, classes), mode)
        }
    }
}

fn one_hot(labels: impl Iterator<Item = usize>, n: usize, classes: usize) -> Tensor {
    let mut y = vec![0.0; n * classes];
    for (i, l) in labels.enumerate() {
        y[i * classes + l] = 1.0;
    }
    Tensor::new(vec![n, classes], y).expect("sized above")
}

/// Loads an IDX3 image file and matching IDX1 label file.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    fn fmt(p: &Path) -> impl Fn(String) -> Error + '_ {
        move |message| Error::Format {
            path: p.to_path_buf(),
            message,
        }
    }
    let (n, d, pixels) = parse_idx_images(&std::fs::read(ip)?).map_err(fmt(ip))?;
    let lab = parse_idx_labels(&std::fs::read(lp)?).map_err(fmt(lp))?;
    if lab.len() != n {
        return Err(fmt(lp)(format!("{} labels for {n} images", lab.len())));
    }
    let features = Tensor::new(vec![n, d], pixels.iter().map(|&b| b as f64 / 255.0).collect())?;
    let targets = one_hot(lab.iter().map(|&l| l as usize), n, MNIST_CLASSES);
    Dataset::new(features, targets, Encoding::OneHot)
}

fn read_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, String> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format!("truncated header at byte {at}"))
}

/// Parses an IDX3 (`0x00000803`) buffer into `(count, rows·cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format!("bad image magic {magic:#010x}"));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let d = rows.checked_mul(cols).ok_or("image size overflows")?;
    let body = n.checked_mul(d).ok_or("image data size overflows")?;
    let payload = &bytes[16..];
    if payload.len() != body {
        return Err(format!("expected {body} pixel bytes, found {}", payload.len()));
    }
    Ok((n, d, payload.to_vec()))
}

/// Parses an IDX1 (`0x00000801`) label buffer.
pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format!("bad label magic {magic:#010x}"));
    }
    let n = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(format!("expected {n} labels, found {}", payload.len()));
    }
    if let Some(bad) = payload.iter().find(|&&l| l as usize >= MNIST_CLASSES) {
        return Err(format!("label {bad} out of range"));
    }
    Ok(payload.to_vec())
}

/// Per-feature mean and standard deviation (population).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Features with standard deviation below this are only centered.
pub const MIN_STD: f64 = 1e-12;

impl NormStats {
    pub fn compute(data: &Dataset) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(Error::DatasetTooSmall(format!("need at least 2 rows for statistics, got {n}")));
        }
        let d = data.dim();
        let mut mean = vec![0.0; d];
        for row in data.features.data().chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in data.features.data().chunks_exact(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }
}

/// Standardizes features. With `stats` given (e.g. training statistics
/// applied to a test set) those are used as-is; otherwise they are computed
/// from `data`.
pub fn normalize(data: &Dataset, stats: Option<&NormStats>) -> Result<(Dataset, NormStats)> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != data.dim() {
                return Err(Error::Shape(format!("stats cover {} features, data has {}", s.mean.len(), data.dim())));
            }
            s.clone()
        }
        None => NormStats::compute(data)?,
    };
    let d = data.dim();
    let mut x = data.features.data().to_vec();
    for row in x.chunks_exact_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v -= m;
            if *s >= MIN_STD {
                *v /= s;
            }
        }
    }
    let out = Dataset {
        features: Tensor::new(vec![data.len(), d], x)?,
        targets: data.targets.clone(),
        encoding: data.encoding,
    };
    Ok((out, stats))
}

/// `n` standard-normal feature vectors labelled `sign(⟨w*, x⟩)` (0 → +1),
/// each label flipped independently with probability `label_noise`.
pub fn synth_linear(n: usize, true_weights: &[f64], label_noise: f64, seed: u64) -> Dataset {
    let d = true_weights.len();
    let mut rng = stream(seed, Purpose::Data);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let dot: f64 = row.iter().zip(true_weights).map(|(a, b)| a * b).sum();
        let mut t = if dot >= 0.0 { 1.0 } else { -1.0 };
        if rng.random::<f64>() < label_noise {
            t = -t;
        }
        x.extend(row);
        y.push(t);
    }
    Dataset {
        features: Tensor::new(vec![n, d], x).expect("sized"),
        targets: Tensor::new(vec![n, 1], y).expect("sized"),
        encoding: Encoding::PmOne,
    }
}

/// Image-like classification data in `[0, 1]^d`: every class has a sparse
/// prototype built from a shared pool of strokes plus class-specific ones.
/// Samples keep each prototype pixel with probability `1 − dropout`, jitter
/// its intensity and add background speckle. Stands in for MNIST when the IDX
/// files are not present.
pub fn synth_prototypes(n: usize, d: usize, classes: usize, difficulty: f64, task_seed: u64, sample_seed: u64) -> Dataset {
    let mut task = stream(task_seed, Purpose::Data);
    // Shared background pattern makes classes overlap.
    let shared: Vec<f64> = (0..d)
        .map(|_| if task.random::<f64>() < 0.08 { task.random_range(0.3..1.0) } else { 0.0 })
        .collect();
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            shared
                .iter()
                .map(|&s| if task.random::<f64>() < 0.1 { task.random_range(0.5..1.0) } else { s })
                .collect()
        })
        .collect();
    let mut rng = crate::rng::StreamKey::new(sample_seed, Purpose::Data).round(1).stream();
    let mut x = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..classes);
        for &p in &protos[c] {
            let mut v = if p > 0.0 && rng.random::<f64>() >= difficulty { p } else { 0.0 };
            if rng.random::<f64>() < 0.5 * difficulty {
                v += rng.random_range(0.0..1.0) * difficulty;
            }
            v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            x.push(v.clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset {
        features: Tensor::new(vec![n, d], x).expect("sized"),
        targets: one_hot(labels.into_iter(), n, classes),
        encoding: Encoding::OneHot,
    }
}
