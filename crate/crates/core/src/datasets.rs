//! Labeled datasets, IDX ingestion, a synthetic Gaussian mixture, and client
//! partitioning (IID and Dirichlet label skew).

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::nn::shuffle;
use crate::rng;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Samples with features in `[-1, 1]` and labels in `[0, class_count)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return input(format!("{} feature rows but {} labels", features.nrows(), labels.len()));
        }
        if class_count == 0 {
            return input("class count must be positive");
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return input(format!("label {bad} outside [0, {class_count})"));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return input(format!("feature value {bad} outside [-1, 1]"));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Same labels, new features (used by attacks that rewrite inputs).
    pub(crate) fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(features, self.labels.clone(), self.class_count)
    }
}

/// Linear map between unsigned pixel bytes and `[-1, 1]`.
pub fn pixel_to_unit(byte: u8) -> f64 {
    byte as f64 / 127.5 - 1.0
}

pub fn unit_to_pixel(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { field: field.into(), detail: "file truncated in header".into() })
}

/// Parsed IDX image file: dimensions after the sample count and raw bytes.
struct IdxImages {
    count: usize,
    dims: Vec<usize>,
    pixels: Vec<u8>,
}

fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            field: "image magic".into(),
            detail: format!("expected {IDX_IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "image count")? as usize;
    let dims = vec![
        read_u32(bytes, 8, "image rows")? as usize,
        read_u32(bytes, 12, "image columns")? as usize,
    ];
    let expected = count * dims.iter().product::<usize>();
    let pixels = &bytes[16..];
    if pixels.len() != expected {
        return Err(Error::Format {
            field: "image data".into(),
            detail: format!("expected {expected} bytes, found {}", pixels.len()),
        });
    }
    Ok(IdxImages { count, dims, pixels: pixels.to_vec() })
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format {
            field: "label magic".into(),
            detail: format!("expected {IDX_LABEL_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "label count")? as usize;
    let labels = &bytes[8..];
    if labels.len() != count {
        return Err(Error::Format {
            field: "label data".into(),
            detail: format!("expected {count} bytes, found {}", labels.len()),
        });
    }
    Ok(labels.to_vec())
}

/// Reads an IDX image/label pair. Images are flattened row-major and each
/// pixel byte is mapped linearly onto `[-1, 1]`; the class count is one more
/// than the largest label present.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let images = parse_idx_images(&fs::read(image_path)?)?;
    let labels = parse_idx_labels(&fs::read(label_path)?)?;
    if images.count != labels.len() {
        return Err(Error::Format {
            field: "sample count".into(),
            detail: format!("{} images but {} labels", images.count, labels.len()),
        });
    }
    let width = images.dims.iter().product::<usize>();
    let features = Array2::from_shape_vec(
        (images.count, width),
        images.pixels.iter().map(|&b| pixel_to_unit(b)).collect(),
    )
    .map_err(|e| Error::Input(e.to_string()))?;
    let labels: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new(features, labels, classes)
}

/// Serializes a dataset as an IDX pair (`rows × cols` images). Features are
/// mapped back to bytes with [`unit_to_pixel`].
pub fn to_idx_bytes(ds: &LabeledDataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return input(format!("{rows}x{cols} images do not match feature width {}", ds.dim()));
    }
    if ds.class_count() > 256 {
        return input("IDX labels are single bytes");
    }
    let mut images = Vec::with_capacity(16 + ds.len() * ds.dim());
    images.extend(IDX_IMAGE_MAGIC.to_be_bytes());
    images.extend((ds.len() as u32).to_be_bytes());
    images.extend((rows as u32).to_be_bytes());
    images.extend((cols as u32).to_be_bytes());
    images.extend(ds.features().iter().map(|&x| unit_to_pixel(x)));

    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend(IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend((ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels().iter().map(|&y| y as u8));
    Ok((images, labels))
}

/// Isotropic Gaussian mixture: class `c` is centred at `separation · u_c`,
/// where `u_c` is a fixed unit direction depending only on `(c, dim)`, with
/// per-coordinate noise `spread`. Values are clipped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthMixture {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    0.5
}

impl SynthMixture {
    pub fn new(classes: usize, per_class: usize, dim: usize, separation: f64) -> Self {
        Self { classes, per_class, dim, separation, spread: default_spread() }
    }

    /// Unit direction for class `c`; independent of the sampling seed so
    /// train and test draws share class geometry.
    pub fn direction(&self, class: usize) -> Vec<f64> {
        let mut r = rng::stream(0x4449_5245, &[class as u64, self.dim as u64]);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    pub fn generate(&self, seed: u64) -> Result<LabeledDataset> {
        if self.classes == 0 || self.per_class == 0 {
            return input("synthetic mixture needs positive class and sample counts");
        }
        if self.dim < 2 {
            return input(format!("synthetic mixture needs dim >= 2, got {}", self.dim));
        }
        if !(self.separation >= 0.0) || !(self.spread >= 0.0) {
            return input("separation and spread must be non-negative");
        }
        let mut r = rng::stream(seed, &[rng::DATA]);
        let n = self.classes * self.per_class;
        let mut features = Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.classes {
            let center: Vec<f64> = self.direction(c).iter().map(|u| u * self.separation).collect();
            for i in 0..self.per_class {
                let row = c * self.per_class + i;
                for (k, mu) in center.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut r);
                    features[[row, k]] = (mu + self.spread * z).clamp(-1.0, 1.0);
                }
                labels.push(c);
            }
        }
        LabeledDataset::new(features, labels, self.classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Sample indices per client.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub mode: PartitionMode,
}

impl PartitionPlan {
    /// Checks the plan is an exact partition of `0..total` with no empty
    /// client.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut seen = vec![false; total];
        for (client, idx) in self.assignments.iter().enumerate() {
            if idx.is_empty() {
                return input(format!("client {client} has no samples"));
            }
            for &i in idx {
                if i >= total || seen[i] {
                    return input(format!("sample {i} assigned twice or out of range"));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return input("partition does not cover every sample");
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Uniform shuffle, then contiguous chunks whose sizes differ by at most one.
pub fn partition_iid(total: usize, clients: usize, seed: u64) -> Result<PartitionPlan> {
    if clients == 0 {
        return input("need at least one client");
    }
    if clients > total {
        return input(format!("{clients} clients for {total} samples"));
    }
    let mut order: Vec<usize> = (0..total).collect();
    shuffle(&mut order, &mut rng::stream(seed, &[rng::PARTITION]));
    let base = total / clients;
    let extra = total % clients;
    let mut assignments = Vec::with_capacity(clients);
    let mut offset = 0;
    for c in 0..clients {
        let size = base + usize::from(c < extra);
        assignments.push(order[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(PartitionPlan { assignments, mode: PartitionMode::Iid })
}

/// Largest-remainder rounding of `weights · total` to integers summing to
/// `total`; ties on the fractional part go to the lower index.
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainder = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        counts[i] += 1;
        remainder -= 1;
    }
    counts
}

/// Per-class Dirichlet(α) label skew. Each class's samples are shuffled and
/// dealt to clients in largest-remainder proportions; any client left empty
/// takes one sample from the currently largest client.
pub fn partition_dirichlet(
    ds: &LabeledDataset,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return input(format!("Dirichlet concentration must be positive, got {alpha}"));
    }
    if clients == 0 {
        return input("need at least one client");
    }
    if clients > ds.len() {
        return input(format!("{clients} clients for {} samples", ds.len()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return input(format!("class {c} has no samples"));
    }

    let mut r = rng::stream(seed, &[rng::PARTITION]);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Input(e.to_string()))?;
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for mut members in by_class {
        shuffle(&mut members, &mut r);
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut r)).collect();
        let sum: f64 = draws.iter().sum();
        let weights: Vec<f64> = if sum > 0.0 && sum.is_finite() {
            draws.iter().map(|d| d / sum).collect()
        } else {
            // every draw underflowed: give the class to one client
            let pick = r.random_range(0..clients);
            (0..clients).map(|c| f64::from(u8::from(c == pick))).collect()
        };
        let counts = largest_remainder(&weights, members.len());
        let mut offset = 0;
        for (c, k) in counts.into_iter().enumerate() {
            assignments[c].extend_from_slice(&members[offset..offset + k]);
            offset += k;
        }
    }

    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let donor = (0..clients)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .unwrap();
        let moved = assignments[donor].pop().expect("donor has samples");
        assignments[empty].push(moved);
    }
    Ok(PartitionPlan { assignments, mode: PartitionMode::Dirichlet { alpha } })
}
