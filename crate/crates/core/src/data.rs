//! Datasets, IDX ingestion, synthetic blobs and the label-skew splitter.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled samples: one feature row per label.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples (or all if fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> ByteReader<'a> {
    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_string(),
            offset,
            reason: reason.into(),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err(self.bytes.len(), format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            self.err(
                self.bytes.len(),
                format!("truncated {what}: need {n} bytes from offset {}", self.pos),
            )
        })?;
        self.pos = end;
        Ok(chunk)
    }
}

/// Parsed IDX image file: `count` images of `rows x cols` u8 pixels.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<IdxImages> {
    let mut r = ByteReader { bytes, pos: 0, path };
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.err(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let pixels = r.take(count * rows * cols, "pixel data")?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>> {
    let mut r = ByteReader { bytes, pos: 0, path };
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.err(0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = r.u32_be("label count")? as usize;
    Ok(r.take(count, "label data")?.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from parsed IDX images and labels; pixels are scaled by 1/255.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let dim = images.rows * images.cols;
    let data = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Matrix::from_vec(images.count, dim, data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&img_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&lbl_bytes, &labels_path.display().to_string())?;
    dataset_from_idx(&images, &labels)
}

fn layout_sign(class: usize, d: usize) -> f64 {
    let mut x = (class as u64) << 32 | d as u64;
    x = x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 29;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 32;
    if x & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Class centre used by [`synth_blobs`]: coordinate 0 is evenly spaced in
/// [0.2, 0.8]; the rest sit at 0.5 ± 0.25 by a fixed hash of (class, dim).
pub fn blob_center(class: usize, classes: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            if d == 0 {
                if classes == 1 {
                    0.5
                } else {
                    0.2 + 0.6 * class as f64 / (classes - 1) as f64
                }
            } else {
                0.5 + 0.25 * layout_sign(class, d)
            }
        })
        .collect()
}

/// Gaussian blobs around [`blob_center`], clamped to [0, 1]; samples are
/// ordered class by class.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::config("synth_blobs", "classes, per_class and dim must be >= 1"));
    }
    if !(spread >= 0.0) {
        return Err(Error::config("synth_blobs.spread", "must be >= 0"));
    }
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = blob_center(c, classes, dim);
        for _ in 0..per_class {
            for &mu in &center {
                let noise = if spread > 0.0 { spread * rng.standard_normal() } else { 0.0 };
                data.push((mu + noise).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(classes * per_class, dim, data)?, labels, classes)
}

/// One client's view of the partitioned data.
#[derive(Clone, Debug)]
pub struct ClientShard {
    pub client_id: usize,
    pub label_set: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
    /// Indices into the source dataset.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Label-skew partition. Labels are shuffled into a ring and client `k` holds
/// the `labels_per_client` consecutive labels starting at position
/// `floor(k * classes / num_clients)`, so window starts are spread evenly and
/// every label is covered when `num_clients * labels_per_client >= classes`.
/// Every label's samples are split
/// evenly among its holders and each client holds out a label-stratified
/// `test_fraction`.
pub fn partition_label_skew(
    data: &Dataset,
    num_clients: usize,
    labels_per_client: usize,
    test_fraction: f64,
    rng: &mut SeededRng,
) -> Result<Vec<ClientShard>> {
    let classes = data.classes();
    if num_clients == 0 {
        return Err(Error::config("num_clients", "must be >= 1"));
    }
    if labels_per_client == 0 || labels_per_client > classes {
        return Err(Error::config(
            "labels_per_client",
            format!("must be in 1..={classes}, got {labels_per_client}"),
        ));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test_fraction", "must be in [0, 1)"));
    }

    let mut label_order: Vec<usize> = (0..classes).collect();
    label_order.shuffle(rng);
    let mut label_sets: Vec<Vec<usize>> = (0..num_clients)
        .map(|k| {
            let mut set: Vec<usize> = (0..labels_per_client)
                .map(|j| label_order[(k * classes / num_clients + j) % classes])
                .collect();
            set.sort_unstable();
            set
        })
        .collect();

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (k, set) in label_sets.iter().enumerate() {
        for &l in set {
            holders[l].push(k);
        }
    }

    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in data.labels().iter().enumerate() {
        by_label[l].push(i);
    }

    let mut train_idx: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    let mut test_idx: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for label in 0..classes {
        let owners = &holders[label];
        let samples = &mut by_label[label];
        if owners.is_empty() {
            if samples.is_empty() {
                continue;
            }
            return Err(Error::Partition(format!(
                "label {label} has {} samples but no client holds it; need num_clients * labels_per_client >= classes",
                samples.len()
            )));
        }
        if samples.len() < owners.len() {
            return Err(Error::Partition(format!(
                "label {label} has {} samples for {} clients",
                samples.len(),
                owners.len()
            )));
        }
        samples.shuffle(rng);
        let base = samples.len() / owners.len();
        let extra = samples.len() % owners.len();
        let mut start = 0;
        for (pos, &k) in owners.iter().enumerate() {
            let size = base + usize::from(pos < extra);
            let chunk = &samples[start..start + size];
            start += size;
            let n_test = ((size as f64 * test_fraction).round() as usize).min(size - 1);
            test_idx[k].extend_from_slice(&chunk[..n_test]);
            train_idx[k].extend_from_slice(&chunk[n_test..]);
        }
    }

    let shards = (0..num_clients)
        .map(|k| {
            train_idx[k].sort_unstable();
            test_idx[k].sort_unstable();
            ClientShard {
                client_id: k,
                label_set: std::mem::take(&mut label_sets[k]),
                train: data.subset(&train_idx[k]),
                test: data.subset(&test_idx[k]),
                train_indices: std::mem::take(&mut train_idx[k]),
                test_indices: std::mem::take(&mut test_idx[k]),
            }
        })
        .collect();
    Ok(shards)
}

#[derive(Debug, Serialize)]
pub struct ShardSummary {
    pub client_id: usize,
    pub label_set: Vec<usize>,
    pub train_count: usize,
    pub test_count: usize,
    pub train_label_counts: BTreeMap<usize, usize>,
    pub test_label_counts: BTreeMap<usize, usize>,
}

fn label_counts(d: &Dataset) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &l in d.labels() {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

pub fn partition_manifest(shards: &[ClientShard]) -> Vec<ShardSummary> {
    shards
        .iter()
        .map(|s| ShardSummary {
            client_id: s.client_id,
            label_set: s.label_set.clone(),
            train_count: s.train.len(),
            test_count: s.test.len(),
            train_label_counts: label_counts(&s.train),
            test_label_counts: label_counts(&s.test),
        })
        .collect()
}
