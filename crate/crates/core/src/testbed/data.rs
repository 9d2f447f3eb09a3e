//! Synthetic Gaussian-blob classification data with geometric class imbalance.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CboError, Result};
use crate::problem::{Matrix, Vector};

/// Features are kept inside `[FEATURE_LO, FEATURE_HI]^p`.
pub const FEATURE_LO: f64 = 0.1;
pub const FEATURE_HI: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `N × p`, one example per row.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl SyntheticDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(CboError::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|y| **y >= classes) {
            return Err(CboError::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(CboError::NonFinite { context: "dataset features" });
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

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn example(&self, i: usize) -> (Vector, usize) {
        (self.features.row(i).transpose(), self.labels[i])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// `min(class_counts) / max(class_counts)`.
    pub fn imbalance_ratio(&self) -> f64 {
        let counts = self.class_counts();
        let max = counts.iter().copied().max().unwrap_or(0);
        let min = counts.iter().copied().min().unwrap_or(0);
        if max == 0 {
            0.0
        } else {
            min as f64 / max as f64
        }
    }

    /// Copy with every feature clipped into `[margin, 1 − margin]`.
    pub fn clipped(&self, margin: f64) -> Self {
        Self {
            features: self.features.map(|x| x.clamp(margin, 1.0 - margin)),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.num_features() {
            write!(out, ",f{j}").unwrap();
        }
        out.push('\n');
        for (i, y) in self.labels.iter().enumerate() {
            write!(out, "{y}").unwrap();
            for x in self.features.row(i).iter() {
                write!(out, ",{x:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses the `label,f0,...` format; the class count is `max label + 1` unless given.
    pub fn from_csv(text: &str, classes: Option<usize>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| CboError::InvalidArgument("empty dataset CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"label") || cols[1..].iter().enumerate().any(|(j, c)| *c != format!("f{j}")) {
            return Err(CboError::InvalidArgument(format!("bad dataset header {header:?}")));
        }
        let p = cols.len() - 1;
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != p + 1 {
                return Err(CboError::InvalidArgument(format!("row {} has {} fields", n + 1, fields.len())));
            }
            labels.push(
                fields[0]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| CboError::InvalidArgument(format!("row {}: bad label: {e}", n + 1)))?,
            );
            for f in &fields[1..] {
                values.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| CboError::InvalidArgument(format!("row {}: bad feature: {e}", n + 1)))?,
                );
            }
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(Matrix::from_row_slice(labels.len(), p, &values), labels, classes)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| CboError::io(path, e))
    }

    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CboError::io(path, e))?;
        Self::from_csv(&text, classes)
    }
}

/// Class sizes `n_k ∝ ratio^{k/(C−1)}` summing to `n`, each at least one.
pub fn geometric_class_counts(n: usize, classes: usize, ratio: f64) -> Result<Vec<usize>> {
    if classes == 0 {
        return Err(CboError::InvalidArgument("need at least one class".into()));
    }
    if n < classes {
        return Err(CboError::InvalidArgument(format!("{n} examples cannot cover {classes} classes")));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CboError::InvalidArgument(format!("imbalance ratio must lie in (0, 1], got {ratio}")));
    }
    let weights: Vec<f64> = (0..classes)
        .map(|k| {
            if classes == 1 {
                1.0
            } else {
                ratio.powf(k as f64 / (classes - 1) as f64)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let spare = n - classes;
    let exact: Vec<f64> = weights.iter().map(|w| w / total * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    // largest remainders take the leftover examples
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().take(spare - assigned) {
        counts[k] += 1;
    }
    Ok(counts.into_iter().map(|c| c + 1).collect())
}

/// Gaussian clusters around random centers, deterministic in `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub features: usize,
    /// Scale of the spread of class centers around `0.5`.
    pub separation: f64,
    /// Per-coordinate standard deviation within a class.
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            features: 4,
            separation: 0.5,
            noise: 0.1,
        }
    }
}

pub struct BlobGenerator {
    spec: BlobSpec,
    centers: Matrix,
    rng: ChaCha8Rng,
}

impl BlobGenerator {
    pub fn new(seed: u64, spec: BlobSpec) -> Result<Self> {
        if spec.classes == 0 || spec.features == 0 {
            return Err(CboError::InvalidArgument("blobs need at least one class and feature".into()));
        }
        if !(spec.noise >= 0.0) || !(spec.separation >= 0.0) {
            return Err(CboError::InvalidArgument("noise and separation must be nonnegative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = spec.separation / (spec.features as f64).sqrt();
        let centers = Matrix::from_fn(spec.classes, spec.features, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 + scale * z
        });
        Ok(Self { spec, centers, rng })
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    /// Draws `counts[k]` points of class `k`, classes interleaved in sampling order.
    pub fn sample(&mut self, counts: &[usize]) -> Result<SyntheticDataset> {
        if counts.len() != self.spec.classes {
            return Err(CboError::DimensionMismatch(format!(
                "{} class counts for {} classes",
                counts.len(),
                self.spec.classes
            )));
        }
        let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
        // deterministic shuffle so minibatches mix classes
        for i in (1..labels.len()).rev() {
            let j = rand::Rng::random_range(&mut self.rng, 0..=i);
            labels.swap(i, j);
        }
        let p = self.spec.features;
        let mut features = Matrix::zeros(labels.len(), p);
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..p {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                features[(i, j)] = (self.centers[(y, j)] + self.spec.noise * z).clamp(FEATURE_LO, FEATURE_HI);
            }
        }
        SyntheticDataset::new(features, labels, self.spec.classes)
    }
}

/// `n` imbalanced training points.
pub fn make_gaussian_blobs(
    seed: u64,
    n: usize,
    classes: usize,
    features: usize,
    imbalance_ratio: f64,
    separation: f64,
) -> Result<SyntheticDataset> {
    let counts = geometric_class_counts(n, classes, imbalance_ratio)?;
    let spec = BlobSpec {
        classes,
        features,
        separation,
        ..BlobSpec::default()
    };
    BlobGenerator::new(seed, spec)?.sample(&counts)
}

/// Imbalanced training set and a class-balanced test set drawn from the same clusters.
pub fn make_blob_split(
    seed: u64,
    spec: &BlobSpec,
    n_train: usize,
    n_test_per_class: usize,
    imbalance_ratio: f64,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let counts = geometric_class_counts(n_train, spec.classes, imbalance_ratio)?;
    let mut generator = BlobGenerator::new(seed, spec.clone())?;
    let train = generator.sample(&counts)?;
    let test = generator.sample(&vec![n_test_per_class; spec.classes])?;
    Ok((train, test))
}
