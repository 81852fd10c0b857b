use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::vecmat::seeded_rng;

use super::{sigmoid, TestbedError};

/// Location of a parse error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Byte(u64),
    Line(u64),
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Byte(b) => write!(f, "byte {b}"),
            Position::Line(l) => write!(f, "line {l}"),
        }
    }
}

/// Labeled samples stored row-major, with a per-sample cleanliness flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    clean_mask: Vec<bool>,
}

impl Dataset {
    /// Builds a dataset with an all-clean mask.
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self, TestbedError> {
        if labels.is_empty() {
            return Err(TestbedError::InvalidParameter("dataset needs at least one sample".into()));
        }
        if dim == 0 {
            return Err(TestbedError::InvalidParameter("feature dimension must be at least 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(TestbedError::DimensionMismatch { what: "features", expected: labels.len() * dim, found: features.len() });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(TestbedError::InvalidParameter(format!("label {bad} outside 0..{num_classes}")));
        }
        let clean_mask = vec![true; labels.len()];
        Ok(Dataset { features, dim, labels, num_classes, clean_mask })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clean_mask(&self) -> &[bool] {
        &self.clean_mask
    }

    /// Widens the label space, e.g. when a split happens to miss a class.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self, TestbedError> {
        if num_classes < self.num_classes {
            return Err(TestbedError::InvalidParameter(format!("cannot shrink {} classes to {num_classes}", self.num_classes)));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Samples `range` as a new dataset (mask preserved).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self, TestbedError> {
        if range.start >= range.end || range.end > self.len() {
            return Err(TestbedError::InvalidParameter(format!("sample range {range:?} outside 0..{}", self.len())));
        }
        Ok(Dataset {
            features: self.features[range.start * self.dim..range.end * self.dim].to_vec(),
            dim: self.dim,
            labels: self.labels[range.clone()].to_vec(),
            num_classes: self.num_classes,
            clean_mask: self.clean_mask[range].to_vec(),
        })
    }
}

/// Gaussian blobs with unit-variance noise around `separation·direction_c`.
///
/// Directions are random unit vectors, orthonormalized when `classes ≤ dim`.
/// Sample `i` belongs to class `i mod classes`.
pub fn synth_blobs(classes: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> Result<Dataset, TestbedError> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(TestbedError::InvalidParameter(format!(
            "synth_blobs needs classes >= 2, per_class >= 1, dim >= 1 (got {classes}, {per_class}, {dim})"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if classes <= dim {
            for prev in &dirs {
                let proj: f64 = d.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (di, pi) in d.iter_mut().zip(prev) {
                    *di -= proj * pi;
                }
            }
        }
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= n);
        dirs.push(d);
    }
    let total = classes * per_class;
    let mut features = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let c = i % classes;
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(separation * dirs[c][j] + noise);
        }
        labels.push(c);
    }
    Dataset::new(features, dim, labels, classes)
}

/// One blob draw split into consecutive train and validation parts, so both
/// share the same class centers. Both parts stay class-balanced up to rounding.
pub fn synth_split(
    classes: usize,
    dim: usize,
    n_train: usize,
    n_val: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), TestbedError> {
    if n_train == 0 || n_val == 0 {
        return Err(TestbedError::InvalidParameter(format!("empty split (train {n_train}, validation {n_val})")));
    }
    let per_class = (n_train + n_val).div_ceil(classes.max(1));
    let all = synth_blobs(classes, dim, per_class, separation, seed)?;
    Ok((all.slice(0..n_train)?, all.slice(n_train..n_train + n_val)?))
}

/// Relabels `floor(ρ·N)` uniformly chosen samples with a different, uniformly
/// drawn class and marks exactly those samples as unclean. Features are untouched.
pub fn corrupt_labels(ds: &Dataset, rho: f64, seed: u64) -> Result<Dataset, TestbedError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(TestbedError::InvalidParameter(format!("corruption ratio {rho} outside [0, 1]")));
    }
    let n = ds.len();
    let count = ((rho * n as f64) + 1e-9).floor() as usize;
    let mut out = ds.clone();
    if count == 0 {
        return Ok(out);
    }
    if ds.num_classes < 2 {
        return Err(TestbedError::InvalidParameter("label corruption needs at least two classes".into()));
    }
    let mut rng = seeded_rng(seed);
    for i in sample(&mut rng, n, count.min(n)) {
        let orig = ds.labels[i];
        let r = rng.random_range(0..ds.num_classes - 1);
        out.labels[i] = if r >= orig { r + 1 } else { r };
        out.clean_mask[i] = false;
    }
    Ok(out)
}

/// F1 score of the "clean" class, predicting clean where `sigmoid(x_i) > threshold`.
///
/// Returns 0 when clean samples exist but none are predicted clean (or none
/// of the predicted ones are), and 1 when there are no clean samples and
/// none are predicted.
pub fn f1_clean(x: &[f64], clean_mask: &[bool], threshold: f64) -> f64 {
    assert_eq!(x.len(), clean_mask.len(), "weights and mask lengths differ");
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&xi, &clean) in x.iter().zip(clean_mask) {
        let predicted = sigmoid(xi) > threshold;
        match (predicted, clean) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return if fp == 0 && fneg == 0 { 1.0 } else { 0.0 };
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    2.0 * precision * recall / (precision + recall)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded IDX image file: `count` images of `rows × cols` pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

fn read_be_u32(bytes: &[u8], offset: usize, source: &str) -> Result<u32, TestbedError> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(TestbedError::Parse {
            source_name: source.to_string(),
            position: Position::Byte(offset as u64),
            message: format!("truncated header: expected {} bytes, {} available", offset + 4, bytes.len()),
        }),
    }
}

fn check_magic(bytes: &[u8], expected: u32, source: &str) -> Result<(), TestbedError> {
    let magic = read_be_u32(bytes, 0, source)?;
    if magic != expected {
        return Err(TestbedError::Parse {
            source_name: source.to_string(),
            position: Position::Byte(0),
            message: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], offset: usize, needed: usize, source: &str) -> Result<(), TestbedError> {
    let available = bytes.len() - offset;
    if available != needed {
        let what = if available < needed { "truncated payload" } else { "trailing bytes after payload" };
        return Err(TestbedError::Parse {
            source_name: source.to_string(),
            position: Position::Byte(offset as u64),
            message: format!("{what}: expected {needed} bytes, {available} available"),
        });
    }
    Ok(())
}

/// Parses a big-endian IDX image file (magic `0x00000803`).
pub fn parse_idx_images(bytes: &[u8], source: &str) -> Result<IdxImages, TestbedError> {
    check_magic(bytes, IDX_IMAGES_MAGIC, source)?;
    let count = read_be_u32(bytes, 4, source)? as usize;
    let rows = read_be_u32(bytes, 8, source)? as usize;
    let cols = read_be_u32(bytes, 12, source)? as usize;
    let needed = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| TestbedError::Parse {
            source_name: source.to_string(),
            position: Position::Byte(4),
            message: "image dimensions overflow".into(),
        })?;
    check_payload(bytes, 16, needed, source)?;
    let pixels = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxImages { count, rows, cols, pixels })
}

/// Parses a big-endian IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8], source: &str) -> Result<Vec<usize>, TestbedError> {
    check_magic(bytes, IDX_LABELS_MAGIC, source)?;
    let count = read_be_u32(bytes, 4, source)? as usize;
    check_payload(bytes, 8, count, source)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>, TestbedError> {
    std::fs::read(path).map_err(|source| TestbedError::Io { path: path.display().to_string(), source })
}

/// Loads an IDX image/label pair. The class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, TestbedError> {
    let img = parse_idx_images(&read_file(images)?, &images.display().to_string())?;
    let lab = parse_idx_labels(&read_file(labels)?, &labels.display().to_string())?;
    if img.count != lab.len() {
        return Err(TestbedError::DimensionMismatch { what: "idx label count", expected: img.count, found: lab.len() });
    }
    let classes = lab.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(img.pixels, img.rows * img.cols, lab, classes)
}

/// Loads a CSV file with header `label,f0,f1,...` (comma separated, dot decimals).
pub fn load_csv(path: &Path) -> Result<Dataset, TestbedError> {
    let text = std::fs::read_to_string(path).map_err(|source| TestbedError::Io { path: path.display().to_string(), source })?;
    parse_csv(&text, &path.display().to_string())
}

pub(crate) fn parse_csv(text: &str, source: &str) -> Result<Dataset, TestbedError> {
    let err = |line: u64, message: String| TestbedError::Parse {
        source_name: source.to_string(),
        position: Position::Line(line),
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.get(0) != Some("label") {
        return Err(err(1, format!("first column must be `label`, found {:?}", header.get(0).unwrap_or(""))));
    }
    let dim = header.len() - 1;
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(err(1, format!("expected column `f{j}`, found `{name}`")));
        }
    }
    if dim == 0 {
        return Err(err(1, "no feature columns".into()));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let label_cell = record.get(0).unwrap_or("");
        let label: usize = label_cell
            .trim()
            .parse()
            .map_err(|_| err(line, format!("column `label`: `{label_cell}` is not a class index")))?;
        labels.push(label);
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| err(line, format!("column `f{j}`: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(line, format!("column `f{j}`: non-finite value")));
            }
            features.push(v);
        }
    }
    if labels.is_empty() {
        return Err(err(2, "no data rows".into()));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(features, dim, labels, classes)
}
