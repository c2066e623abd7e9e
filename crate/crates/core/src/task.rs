//! Task datasets in a shared feature space.
//!
//! Every task's samples live in `R^d` for a suite-wide `d`; labels are class
//! indices below a suite-wide class cap so the set embedding sees a fixed input
//! width of `d + class_cap` (features followed by a one-hot label).

use std::collections::HashMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::{self, gaussian};
use crate::{Error, Result};

/// Default shared feature dimension.
pub const DEFAULT_FEATURE_DIM: usize = 16;
/// Default cap on the number of classes of any task in a suite.
pub const DEFAULT_CLASS_CAP: usize = 16;
/// Length of the class-distribution block in the meta-feature vector.
pub const CLASS_DIST_LEN: usize = 16;
/// Dimension of [`compute_meta_features`] output.
pub const META_FEATURE_DIM: usize = 4 + CLASS_DIST_LEN + 6 + 1;
/// Equal-width bins used when estimating feature/label mutual information.
pub const MI_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// 80/10/10 split of a seeded shuffle of `0..n`.
    pub fn shuffled(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seeding::rng(seed));
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let test = idx.split_off(n_train + n_val);
        let validation = idx.split_off(n_train);
        Self {
            train: idx,
            validation,
            test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: String,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    splits: Splits,
}

impl TaskDataset {
    pub fn new(
        task_id: impl Into<String>,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        let ds = Self {
            task_id: task_id.into(),
            features,
            labels,
            num_classes,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no samples".into()));
        }
        if self.labels.len() != n {
            return Err(Error::InvalidInput("feature/label count mismatch".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidInput("num_classes must be positive".into()));
        }
        let d = self.features[0].len();
        if d == 0 || self.features.iter().any(|x| x.len() != d) {
            return Err(Error::InvalidInput(
                "feature vectors must share a positive dimension".into(),
            ));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {y} >= num_classes {}",
                self.num_classes
            )));
        }
        let mut seen = vec![false; n];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.validation)
            .chain(&self.splits.test)
        {
            if i >= n || seen[i] {
                return Err(Error::InvalidInput(
                    "splits must be disjoint and within range".into(),
                ));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidInput("splits must cover every sample".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Validation => &self.splits.validation,
            Split::Test => &self.splits.test,
        }
    }

    pub fn with_task_id(mut self, id: impl Into<String>) -> Self {
        self.task_id = id.into();
        self
    }

    /// `features ++ one_hot(label, class_cap)` for sample `i`.
    pub fn embed_row(&self, i: usize, class_cap: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.feature_dim() + class_cap);
        row.extend_from_slice(&self.features[i]);
        row.extend((0..class_cap).map(|c| if c == self.labels[i] { 1.0 } else { 0.0 }));
        row
    }

    fn check_class_cap(&self, class_cap: usize) -> Result<()> {
        if self.num_classes > class_cap {
            return Err(Error::InvalidInput(format!(
                "task {} has {} classes, above the class cap {class_cap}",
                self.task_id, self.num_classes
            )));
        }
        Ok(())
    }

    /// Every row of a split, in split order.
    pub fn split_rows(&self, split: Split, class_cap: usize) -> Result<Vec<Vec<f64>>> {
        self.check_class_cap(class_cap)?;
        Ok(self
            .split(split)
            .iter()
            .map(|&i| self.embed_row(i, class_cap))
            .collect())
    }

    /// Writes the dataset as CSV: features then integer label, no header.
    /// Features then the integer label per line, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (x, y) in self.features.iter().zip(&self.labels) {
            for v in x {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{y}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::db::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Draws `size` rows from a split without replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &TaskDataset,
    split: Split,
    size: usize,
    class_cap: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    dataset.check_class_cap(class_cap)?;
    let pool = dataset.split(split);
    if size > pool.len() {
        return Err(Error::InvalidInput(format!(
            "batch of {size} requested from a split of {}",
            pool.len()
        )));
    }
    Ok(pool
        .choose_multiple(rng, size)
        .map(|&i| dataset.embed_row(i, class_cap))
        .collect())
}

fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Recipe for a synthetic Gaussian-cluster classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub seed: u64,
    pub num_samples: usize,
    pub num_classes: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Distance between class centers (unit within-cluster variance).
    pub margin: f64,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default = "default_true")]
    pub rotate: bool,
    /// Dimensions carrying class signal; the rest is pure noise.
    pub informative: usize,
    /// Gaussian clusters per class; above one the classes are multimodal.
    #[serde(default = "default_one")]
    pub clusters_per_class: usize,
}

impl SyntheticTaskSpec {
    /// Seed of the train/validation/test shuffle of the generated task.
    pub fn split_seed(&self) -> u64 {
        seeding::derive(self.seed, &[seeding::tag("splits")])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("task {}: {m}", self.task_id)));
        if self.num_samples < 30 {
            return bad("num_samples must be >= 30");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise_rate must be in [0, 1)");
        }
        if self.feature_dim == 0 || self.informative == 0 || self.informative > self.feature_dim {
            return bad("informative must be in 1..=feature_dim");
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad("margin must be finite and non-negative");
        }
        if self.clusters_per_class == 0 {
            return bad("clusters_per_class must be >= 1");
        }
        Ok(())
    }
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix (rows).
/// Ten-task desk-scale suite in three families: well separated blobs,
/// multimodal classes and many noisy classes.
pub fn desk_suite(seed: u64, num_samples: usize) -> Vec<SyntheticTaskSpec> {
    let mut specs = Vec::new();
    let mut push = |name: String, classes, margin, noise, informative, clusters| {
        let i = specs.len() as u64;
        specs.push(SyntheticTaskSpec {
            task_id: name,
            seed: seeding::derive(seed, &[seeding::tag("desk-suite"), i]),
            num_samples,
            num_classes: classes,
            feature_dim: DEFAULT_FEATURE_DIM,
            margin,
            noise_rate: noise,
            rotate: true,
            informative,
            clusters_per_class: clusters,
        });
    };
    for (k, (margin, informative)) in [(2.0, 3), (2.5, 4), (2.0, 6)].into_iter().enumerate() {
        push(format!("blobs-{k}"), 2, margin, 0.0, informative, 1);
    }
    for (k, (margin, informative)) in [(3.5, 4), (4.0, 6), (3.5, 6), (4.0, 8)]
        .into_iter()
        .enumerate()
    {
        push(format!("modes-{k}"), 3, margin, 0.0, informative, 4);
    }
    for (k, (classes, margin, noise)) in [(8, 3.0, 0.1), (10, 3.5, 0.05), (12, 3.0, 0.1)]
        .into_iter()
        .enumerate()
    {
        push(format!("many-{k}"), classes, margin, noise, 12, 1);
    }
    specs
}

pub(crate) fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, ri)| *x -= dot * ri);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows
}

pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let mut rng = seeding::rng(spec.seed);
    let (d, inf, c, k) = (
        spec.feature_dim,
        spec.informative,
        spec.num_classes,
        spec.clusters_per_class,
    );

    // Centers in the informative subspace, indexed [class * k + cluster].
    let mut centers: Vec<Vec<f64>> = if k == 1 && c <= inf {
        let r = spec.margin / std::f64::consts::SQRT_2;
        (0..c)
            .map(|ci| (0..inf).map(|j| if j == ci { r } else { 0.0 }).collect())
            .collect()
    } else {
        let s = spec.margin / (2.0 * inf as f64).sqrt();
        (0..c * k)
            .map(|_| (0..inf).map(|_| s * gaussian(&mut rng)).collect())
            .collect()
    };
    let mean: Vec<f64> = (0..inf)
        .map(|j| centers.iter().map(|m| m[j]).sum::<f64>() / centers.len() as f64)
        .collect();
    for m in &mut centers {
        m.iter_mut().zip(&mean).for_each(|(x, mu)| *x -= mu);
    }
    let rotation = spec.rotate.then(|| random_orthogonal(d, &mut rng));

    let n = spec.num_samples;
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n);
    for y in labels.iter_mut() {
        let cluster = rng.random_range(0..k);
        let center = &centers[*y * k + cluster];
        let raw: Vec<f64> = (0..d)
            .map(|j| gaussian(&mut rng) + if j < inf { center[j] } else { 0.0 })
            .collect();
        let x = match &rotation {
            Some(q) => q
                .iter()
                .map(|row| row.iter().zip(&raw).map(|(a, b)| a * b).sum())
                .collect(),
            None => raw,
        };
        features.push(x);
        if spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate) {
            let shift = rng.random_range(1..c);
            *y = (*y + shift) % c;
        }
    }
    let splits = Splits::shuffled(n, spec.split_seed());
    TaskDataset::new(spec.task_id.clone(), features, labels, c, splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub has_header: bool,
    pub split_seed: u64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            has_header: false,
            split_seed: 0,
        }
    }
}

/// Reads a comma-separated file whose last column is the label.
///
/// Labels are mapped to class indices in order of first appearance.
pub fn load_csv_task(path: &Path, task_id: &str, schema: &CsvSchema) -> Result<TaskDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(file);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                message: "need at least one feature column and a label column".into(),
            });
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} columns, found {}", record.len()),
                })
            }
            _ => {}
        }
        let n = record.len();
        let x = record
            .iter()
            .take(n - 1)
            .enumerate()
            .map(|(col, cell)| {
                cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!(
                        "row {line}, column {}: cannot parse {cell:?} as a number",
                        col + 1
                    ),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = record[n - 1].trim().to_string();
        let next = label_index.len();
        labels.push(*label_index.entry(label).or_insert(next));
        features.push(x);
    }
    if features.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "file contains no samples".into(),
        });
    }
    let splits = Splits::shuffled(features.len(), schema.split_seed);
    TaskDataset::new(task_id, features, labels, label_index.len(), splits)
}

/// Hand-computed task statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedMetaFeatures {
    pub total_samples: usize,
    pub num_classes: usize,
    pub num_features: usize,
    /// Nats.
    pub label_entropy: f64,
    /// Class proportions sorted descending, zero-padded or truncated.
    pub class_distribution: Vec<f64>,
    /// (mean, std) across features of each feature's min, max and median.
    pub feature_min: (f64, f64),
    pub feature_max: (f64, f64),
    pub feature_median: (f64, f64),
    pub mean_mutual_information: f64,
}

impl PrecomputedMetaFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            (self.total_samples as f64).ln_1p(),
            (self.num_classes as f64).ln_1p(),
            (self.num_features as f64).ln_1p(),
            self.label_entropy,
        ];
        v.extend_from_slice(&self.class_distribution);
        v.extend([
            self.feature_min.0,
            self.feature_min.1,
            self.feature_max.0,
            self.feature_max.1,
            self.feature_median.0,
            self.feature_median.1,
            self.mean_mutual_information,
        ]);
        debug_assert_eq!(v.len(), META_FEATURE_DIM);
        v
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn entropy_from_counts(counts: &[usize], total: usize) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information (nats) between a feature quantized into equal-width
/// bins and the label.
pub fn binned_mutual_information(values: &[f64], labels: &[usize], num_classes: usize) -> f64 {
    let n = values.len();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / MI_BINS as f64;
    let bin = |v: f64| -> usize {
        if width <= 0.0 {
            0
        } else {
            (((v - lo) / width) as usize).min(MI_BINS - 1)
        }
    };
    let mut joint = vec![0usize; MI_BINS * num_classes];
    let mut bins = vec![0usize; MI_BINS];
    let mut classes = vec![0usize; num_classes];
    for (&v, &y) in values.iter().zip(labels) {
        let b = bin(v);
        joint[b * num_classes + y] += 1;
        bins[b] += 1;
        classes[y] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for b in 0..MI_BINS {
        for y in 0..num_classes {
            let c = joint[b * num_classes + y];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / nf;
            let px = bins[b] as f64 / nf;
            let py = classes[y] as f64 / nf;
            mi += pxy * (pxy / (px * py)).ln();
        }
    }
    mi.max(0.0)
}

pub fn precomputed_meta_features(dataset: &TaskDataset) -> PrecomputedMetaFeatures {
    let n = dataset.len();
    let c = dataset.num_classes();
    let d = dataset.feature_dim();
    let mut counts = vec![0usize; c];
    for &y in dataset.labels() {
        counts[y] += 1;
    }
    let mut dist: Vec<f64> = counts.iter().map(|&k| k as f64 / n as f64).collect();
    dist.sort_by(|a, b| b.total_cmp(a));
    dist.resize(CLASS_DIST_LEN, 0.0);

    let (mut mins, mut maxs, mut medians, mut mis) = (
        Vec::with_capacity(d),
        Vec::with_capacity(d),
        Vec::with_capacity(d),
        Vec::with_capacity(d),
    );
    for j in 0..d {
        let mut col: Vec<f64> = dataset.features().iter().map(|x| x[j]).collect();
        mis.push(binned_mutual_information(&col, dataset.labels(), c));
        col.sort_by(f64::total_cmp);
        mins.push(col[0]);
        maxs.push(col[n - 1]);
        medians.push(median(&col));
    }
    PrecomputedMetaFeatures {
        total_samples: n,
        num_classes: c,
        num_features: d,
        label_entropy: entropy_from_counts(&counts, n),
        class_distribution: dist,
        feature_min: mean_std(&mins),
        feature_max: mean_std(&maxs),
        feature_median: mean_std(&medians),
        mean_mutual_information: mis.iter().sum::<f64>() / d as f64,
    }
}

/// Fixed-length meta-feature vector of length [`META_FEATURE_DIM`].
pub fn compute_meta_features(dataset: &TaskDataset) -> Vec<f64> {
    precomputed_meta_features(dataset).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::seq::SliceRandom;
    use std::collections::HashSet;

    pub(crate) fn spec(seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_id: format!("t{seed}"),
            seed,
            num_samples: 1000,
            num_classes: 2,
            feature_dim: 16,
            margin: 10.0,
            noise_rate: 0.0,
            rotate: true,
            informative: 4,
            clusters_per_class: 1,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_task(&spec(3)).unwrap();
        let b = generate_synthetic_task(&spec(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_task(&spec(4)).unwrap());
    }

    #[test]
    fn split_sizes() {
        let ds = generate_synthetic_task(&spec(1)).unwrap();
        assert_eq!(ds.splits().train.len(), 800);
        assert_eq!(ds.splits().validation.len(), 100);
        assert_eq!(ds.splits().test.len(), 100);
        let all: HashSet<usize> = ds
            .splits()
            .train
            .iter()
            .chain(&ds.splits().validation)
            .chain(&ds.splits().test)
            .copied()
            .collect();
        assert_eq!(all.len(), 1000);
    }

    #[test]
    fn separable_task_is_solved_by_nearest_centroid() {
        let ds = generate_synthetic_task(&spec(7)).unwrap();
        let d = ds.feature_dim();
        let mut centroids = vec![vec![0.0; d]; 2];
        let mut counts = [0usize; 2];
        for &i in &ds.splits().train {
            let y = ds.labels()[i];
            counts[y] += 1;
            centroids[y]
                .iter_mut()
                .zip(&ds.features()[i])
                .for_each(|(c, x)| *c += x);
        }
        for (c, k) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= k as f64);
        }
        let dist =
            |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum() };
        let val = &ds.splits().validation;
        let correct = val
            .iter()
            .filter(|&&i| {
                let x = &ds.features()[i];
                let pred = if dist(x, &centroids[0]) <= dist(x, &centroids[1]) {
                    0
                } else {
                    1
                };
                pred == ds.labels()[i]
            })
            .count();
        assert!(correct as f64 / val.len() as f64 > 0.99);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(1);
        s.num_samples = 10;
        assert!(generate_synthetic_task(&s).is_err());
        let mut s = spec(1);
        s.num_classes = 1;
        assert!(generate_synthetic_task(&s).is_err());
        let mut s = spec(1);
        s.noise_rate = 1.0;
        assert!(generate_synthetic_task(&s).is_err());
    }

    #[test]
    fn label_noise_flips_roughly_the_requested_fraction() {
        let clean = generate_synthetic_task(&spec(9)).unwrap();
        let mut s = spec(9);
        s.noise_rate = 0.2;
        let noisy = generate_synthetic_task(&s).unwrap();
        // Same feature stream is not guaranteed, so compare via a separable
        // classifier: the clean labels are the sign along the class axis.
        assert_eq!(clean.len(), noisy.len());
        let mf = precomputed_meta_features(&noisy);
        assert!(
            mf.mean_mutual_information < precomputed_meta_features(&clean).mean_mutual_information
        );
    }

    fn tiny(labels: Vec<usize>, features: Vec<Vec<f64>>, c: usize) -> TaskDataset {
        let n = labels.len();
        TaskDataset::new("tiny", features, labels, c, Splits::shuffled(n, 0)).unwrap()
    }

    #[test]
    fn balanced_entropy_is_ln2() {
        let ds = tiny(vec![0, 1, 0, 1], vec![vec![0.0]; 4], 2);
        let mf = precomputed_meta_features(&ds);
        assert!((mf.label_entropy - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(compute_meta_features(&ds).len(), META_FEATURE_DIM);
    }

    #[test]
    fn feature_equal_to_label_has_mi_equal_to_entropy() {
        let labels = vec![0, 1, 1, 0, 1, 1, 1, 0];
        let x: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let ds = tiny(labels.clone(), x.iter().map(|&v| vec![v]).collect(), 2);
        let mf = precomputed_meta_features(&ds);
        let mi = binned_mutual_information(&x, &labels, 2);
        assert!((mi - mf.label_entropy).abs() < 1e-12);
        assert!((mf.mean_mutual_information - mf.label_entropy).abs() < 1e-12);
    }

    /// Slow oracle: explicit probability tables from a pass over each bin.
    fn oracle_mi(values: &[f64], labels: &[usize], c: usize) -> f64 {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n = values.len() as f64;
        let bin_of = |v: f64| {
            if hi == lo {
                0
            } else {
                let mut b = 0;
                for k in 1..MI_BINS {
                    if v >= lo + (hi - lo) * k as f64 / MI_BINS as f64 {
                        b = k;
                    }
                }
                b
            }
        };
        let mut mi = 0.0;
        for b in 0..MI_BINS {
            for y in 0..c {
                let nxy = values
                    .iter()
                    .zip(labels)
                    .filter(|(v, l)| bin_of(**v) == b && **l == y)
                    .count();
                if nxy == 0 {
                    continue;
                }
                let nx = values.iter().filter(|v| bin_of(**v) == b).count();
                let ny = labels.iter().filter(|l| **l == y).count();
                let pxy = nxy as f64 / n;
                mi += pxy * (pxy * n * n / (nx as f64 * ny as f64)).ln();
            }
        }
        mi
    }

    #[test]
    fn meta_features_match_direct_count_oracle() {
        let mut rng = seeding::rng(21);
        let n = 300;
        let c = 4;
        // Values on a coarse lattice keep the bin assignment unambiguous.
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let feats: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                (0..3)
                    .map(|j| (rng.random_range(0..20) as f64 + (y * j) as f64) * 0.25)
                    .collect()
            })
            .collect();
        let ds = tiny(labels.clone(), feats.clone(), c);
        let mf = precomputed_meta_features(&ds);
        let mut oracle = 0.0;
        for j in 0..3 {
            let col: Vec<f64> = feats.iter().map(|x| x[j]).collect();
            oracle += oracle_mi(&col, &labels, c);
        }
        assert!((mf.mean_mutual_information - oracle / 3.0).abs() < 1e-9);
        let mut h = 0.0;
        for y in 0..c {
            let p = labels.iter().filter(|&&l| l == y).count() as f64 / n as f64;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        assert!((mf.label_entropy - h).abs() < 1e-9);
    }

    #[test]
    fn meta_features_ignore_sample_order() {
        let ds = generate_synthetic_task(&spec(5)).unwrap();
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut seeding::rng(1));
        let permuted = TaskDataset::new(
            "p",
            idx.iter().map(|&i| ds.features()[i].clone()).collect(),
            idx.iter().map(|&i| ds.labels()[i]).collect(),
            ds.num_classes(),
            Splits::shuffled(ds.len(), 0),
        )
        .unwrap();
        assert_eq!(compute_meta_features(&ds), compute_meta_features(&permuted));
    }

    #[test]
    fn batch_shape_and_full_permutation() {
        let ds = generate_synthetic_task(&spec(2)).unwrap();
        let mut rng = seeding::rng(0);
        let b = sample_batch(&ds, Split::Validation, 100, 16, &mut rng).unwrap();
        assert_eq!(b.len(), 100);
        assert!(b.iter().all(|r| r.len() == 16 + 16));
        let mut got: Vec<Vec<u64>> = b
            .iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut want: Vec<Vec<u64>> = ds
            .split_rows(Split::Validation, 16)
            .unwrap()
            .iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert!(sample_batch(&ds, Split::Validation, 101, 16, &mut rng).is_err());
        assert!(sample_batch(&ds, Split::Validation, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn batch_sampling_is_uniform() {
        let ds = tiny(
            (0..40).map(|i| i % 2).collect(),
            (0..40).map(|i| vec![i as f64]).collect(),
            2,
        );
        let pool = ds.split(Split::Train).len();
        let draws = 10_000;
        let size = 5;
        let mut rng = seeding::rng(8);
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for _ in 0..draws {
            for row in sample_batch(&ds, Split::Train, size, 2, &mut rng).unwrap() {
                *counts.entry(row[0].to_bits()).or_default() += 1;
            }
        }
        assert_eq!(counts.len(), pool);
        let q = size as f64 / pool as f64;
        let sigma = (draws as f64 * q * (1.0 - q)).sqrt();
        for (_, c) in counts {
            assert!((c as f64 - draws as f64 * q).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "1.0,2.0,cat\n3.5,-1,dog\n0,0,cat\n").unwrap();
        let ds = load_csv_task(&p, "a", &CsvSchema::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim(), 2);
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.num_classes(), 2);

        let q = dir.path().join("b.csv");
        std::fs::copy(&p, &q).unwrap();
        let other = load_csv_task(&q, "b", &CsvSchema::default()).unwrap();
        assert_eq!(other.with_task_id("a"), ds);

        let h = dir.path().join("h.csv");
        std::fs::write(&h, "x,y,label\n1,2,a\n3,4,b\n").unwrap();
        let schema = CsvSchema {
            has_header: true,
            split_seed: 0,
        };
        assert_eq!(load_csv_task(&h, "h", &schema).unwrap().len(), 2);
    }

    #[test]
    fn csv_errors_name_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "1,2,a\n1,oops,b\n").unwrap();
        let err = load_csv_task(&p, "bad", &CsvSchema::default()).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("column 2"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
        std::fs::write(&p, "1,2,a\n1,b\n").unwrap();
        assert!(matches!(
            load_csv_task(&p, "bad", &CsvSchema::default()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn csv_roundtrip_of_generated_task() {
        let ds = generate_synthetic_task(&spec(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        ds.write_csv(&p).unwrap();
        let back = load_csv_task(&p, "t", &CsvSchema::default()).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.len(), ds.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn splits_are_disjoint_covering_and_stable(n in 1usize..400, seed in any::<u64>()) {
            let s = Splits::shuffled(n, seed);
            let mut all: Vec<usize> =
                s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(Splits::shuffled(n, seed), s);
        }

        #[test]
        fn meta_features_ignore_row_order(seed in 0u64..1000, perm_seed in any::<u64>()) {
            let mut sp = spec(seed);
            sp.num_samples = 120;
            sp.num_classes = 3;
            sp.margin = 2.0;
            let ds = generate_synthetic_task(&sp).unwrap();
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut crate::seeding::rng(perm_seed));
            let features = order.iter().map(|&i| ds.features()[i].clone()).collect();
            let labels = order.iter().map(|&i| ds.labels()[i]).collect();
            let permuted = TaskDataset::new("p", features, labels, ds.num_classes(), Splits::shuffled(ds.len(), 1)).unwrap();
            let (a, b) = (compute_meta_features(&ds), compute_meta_features(&permuted));
            prop_assert_eq!(a.len(), META_FEATURE_DIM);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
            }
        }
    }
}
