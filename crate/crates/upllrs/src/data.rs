//! Dataset synthesis, loading, corruption, splitting, and auditing.
//!
//! The corruption protocol is flip-then-partial: each clean label keeps
//! its value with probability `1 - mu` and otherwise flips uniformly to
//! one of the other `C - 1` classes (each with probability
//! `kappa = mu / (C - 1)`); the resulting label is then treated as true
//! and every other class enters the candidate set independently with
//! probability `eta`.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::Distribution;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeding::derive_seed;

/// Maximum class count representable by the candidate bitmask.
pub const MAX_CLASSES: usize = 128;

/// Set of candidate labels for one instance, as a bitmask over classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateSet(u128);

impl CandidateSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn singleton(class: usize) -> Self {
        Self(1u128 << class)
    }

    pub fn insert(&mut self, class: usize) {
        self.0 |= 1u128 << class;
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0 & (1u128 << class) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Member classes in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        let bits = self.0;
        (0..MAX_CLASSES).filter(move |&c| bits & (1u128 << c) != 0)
    }
}

/// Fully supervised dataset: features plus one true label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if class_count == 0 || class_count > MAX_CLASSES {
            return Err(Error::Config(format!(
                "class count must be in 1..={MAX_CLASSES}, got {class_count}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        features.ensure_finite("dataset features")?;
        Ok(Self { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row subset in the given index order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// Partially labeled training set with optional hidden audit labels.
///
/// `hidden_truth` (the clean labels) and `hidden_flipped` (the labels
/// after unreliability flipping) are never visible to training; they
/// exist so audits can measure what corruption actually did.
#[derive(Debug, Clone, PartialEq)]
pub struct UpllDataset {
    pub features: Matrix,
    pub candidates: Vec<CandidateSet>,
    pub hidden_truth: Option<Vec<usize>>,
    pub hidden_flipped: Option<Vec<usize>>,
    pub class_count: usize,
}

impl UpllDataset {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// True where the hidden clean label is inside the candidate set.
    pub fn reliability_flags(&self) -> Result<Vec<bool>> {
        let truth = self
            .hidden_truth
            .as_ref()
            .ok_or_else(|| Error::AuditUnavailable("dataset has no hidden truth".into()))?;
        Ok(truth
            .iter()
            .zip(&self.candidates)
            .map(|(&y, s)| s.contains(y))
            .collect())
    }

    pub fn gather(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.gather_rows(indices),
            candidates: indices.iter().map(|&i| self.candidates[i]).collect(),
            hidden_truth: self
                .hidden_truth
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
            hidden_flipped: self
                .hidden_flipped
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
            class_count: self.class_count,
        }
    }
}

/// Disjoint, exhaustive index sets for a 4:1:1 split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `C` isotropic unit-variance Gaussian clusters with means `separation`
/// apart, balanced over classes (label of row `i` is `i mod C`).
///
/// For `d >= C` the means sit on a random orthonormal frame scaled by
/// `separation / sqrt(2)`, which makes every pairwise mean distance equal
/// to `separation` exactly; for `d < C` random unit directions of the
/// same length are used and distances are only approximate.
pub fn synth_gaussians(
    n: usize,
    class_count: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(2..=MAX_CLASSES).contains(&class_count) {
        return Err(Error::Config(format!(
            "class count must be in 2..={MAX_CLASSES}, got {class_count}"
        )));
    }
    if n < class_count {
        return Err(Error::Config(format!("n={n} smaller than class count {class_count}")));
    }
    if dim < 2 {
        return Err(Error::Config(format!("dim must be >= 2, got {dim}")));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Config(format!("separation must be >= 0, got {separation}")));
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let scale = separation / 2f64.sqrt();
    let mut means = vec![vec![0.0; dim]; class_count];
    if separation > 0.0 {
        if dim >= class_count {
            // Gram-Schmidt on random Gaussian rows.
            for c in 0..class_count {
                let mut v: Vec<f64> =
                    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                for prev in means.iter().take(c) {
                    let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    let norm2: f64 = prev.iter().map(|x| x * x).sum();
                    if norm2 > 0.0 {
                        for (vi, pi) in v.iter_mut().zip(prev) {
                            *vi -= dot / norm2 * pi;
                        }
                    }
                }
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for vi in v.iter_mut() {
                    *vi *= scale / norm;
                }
                means[c] = v;
            }
        } else {
            for mean in means.iter_mut() {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                *mean = v.iter().map(|x| x * scale / norm).collect();
            }
        }
    }

    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % class_count;
        labels.push(label);
        for &mean in &means[label] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + noise);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, dim, data)?, labels, class_count)
}

/// Per-column mean and standard deviation captured by `load_csv`.
pub type ColumnStats = Vec<(f64, f64)>;

/// Loads a labeled dataset from CSV without standardizing the features.
///
/// The label column (by header name) must hold integers; they are
/// re-indexed densely to `0..C-1` in ascending value order.
pub fn load_csv_raw(path: &Path, label_column: &str) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::DataFormat {
        row: 1,
        col: 1,
        msg: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = columns
        .iter()
        .position(|c| *c == label_column)
        .ok_or_else(|| Error::DataFormat {
            row: 1,
            col: 1,
            msg: format!("label column {label_column:?} not found in header"),
        })?;
    let dim = columns.len() - 1;
    if dim == 0 {
        return Err(Error::DataFormat {
            row: 1,
            col: 1,
            msg: "no feature columns".into(),
        });
    }

    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    for (line_no, line) in lines {
        let row = line_no + 1; // 1-based, counting the header
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::DataFormat {
                row,
                col: cells.len(),
                msg: format!("expected {} cells, got {}", columns.len(), cells.len()),
            });
        }
        for (col0, cell) in cells.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::DataFormat {
                    row,
                    col: col0 + 1,
                    msg: "missing value".into(),
                });
            }
            if col0 == label_idx {
                let v: i64 = cell.parse().map_err(|_| Error::DataFormat {
                    row,
                    col: col0 + 1,
                    msg: format!("label {cell:?} is not an integer"),
                })?;
                raw_labels.push(v);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::DataFormat {
                    row,
                    col: col0 + 1,
                    msg: format!("feature {cell:?} is not numeric"),
                })?;
                if !v.is_finite() {
                    return Err(Error::DataFormat {
                        row,
                        col: col0 + 1,
                        msg: "non-finite feature".into(),
                    });
                }
                data.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::DataFormat {
            row: 2,
            col: 1,
            msg: "no data rows".into(),
        });
    }

    // Dense re-indexing in ascending label-value order.
    let mut distinct: Vec<i64> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() > MAX_CLASSES {
        return Err(Error::Config(format!(
            "{} distinct labels exceed the {MAX_CLASSES}-class limit",
            distinct.len()
        )));
    }
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|v| distinct.binary_search(v).expect("present") )
        .collect();

    let n = labels.len();
    let features = Matrix::from_vec(n, dim, data)?;
    LabeledDataset::new(features, labels, distinct.len())
}

/// Loads a CSV and z-scores the features, returning the per-column stats
/// so the standardization can be inverted. Constant columns become zeros.
pub fn load_csv_with_stats(
    path: &Path,
    label_column: &str,
) -> Result<(LabeledDataset, ColumnStats)> {
    let mut dataset = load_csv_raw(path, label_column)?;
    let stats = standardize_columns(&mut dataset.features);
    Ok((dataset, stats))
}

/// `load_csv_with_stats` without the stats.
pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledDataset> {
    load_csv_with_stats(path, label_column).map(|(d, _)| d)
}

/// Z-scores each column in place; constant columns become all zeros.
/// Returns per-column `(mean, std)` with `std = 0` for constant columns.
pub fn standardize_columns(features: &mut Matrix) -> ColumnStats {
    let (n, d) = (features.rows(), features.cols());
    let mut stats = Vec::with_capacity(d);
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += features.get(i, j);
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let diff = features.get(i, j) - mean;
            var += diff * diff;
        }
        var /= n as f64;
        let std = var.sqrt();
        for i in 0..n {
            let v = features.get(i, j);
            features.set(i, j, if std > 0.0 { (v - mean) / std } else { 0.0 });
        }
        stats.push((mean, std));
    }
    stats
}

/// Writes a labeled dataset as CSV with a leading `label` column.
pub fn write_csv(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for j in 0..dataset.features.cols() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in 0..dataset.len() {
        let _ = write!(out, "{}", dataset.labels[i]);
        for &v in dataset.features.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Seeded shuffle, then `floor(4n/6)` train, `floor(n/6)` val, rest test.
pub fn split_4_1_1(n: usize, seed: u64) -> Result<SplitIndices> {
    if n < 6 {
        return Err(Error::Config(format!("need at least 6 samples to split, got {n}")));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = 4 * n / 6;
    let n_val = n / 6;
    let val_end = n_train + n_val;
    Ok(SplitIndices {
        train: indices[..n_train].to_vec(),
        val: indices[n_train..val_end].to_vec(),
        test: indices[val_end..].to_vec(),
    })
}

/// Flips each label with probability `mu`, choosing the replacement
/// uniformly among the other `C - 1` classes.
pub fn corrupt_labels(labels: &[usize], class_count: usize, mu: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::Config(format!("mu must be in [0,1), got {mu}")));
    }
    if class_count < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {class_count}")));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    Ok(labels
        .iter()
        .map(|&y| {
            if rng.gen::<f64>() < mu {
                let j = rng.gen_range(0..class_count - 1);
                if j >= y {
                    j + 1
                } else {
                    j
                }
            } else {
                y
            }
        })
        .collect())
}

/// Builds candidate sets: each set contains its (possibly flipped) label
/// and every other class independently with probability `eta`.
pub fn generate_candidates(
    unreliable_labels: &[usize],
    class_count: usize,
    eta: f64,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must be in [0,1), got {eta}")));
    }
    if class_count > MAX_CLASSES {
        return Err(Error::Config(format!(
            "class count {class_count} exceeds the {MAX_CLASSES}-class limit"
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    Ok(unreliable_labels
        .iter()
        .map(|&y| {
            let mut set = CandidateSet::singleton(y);
            for c in 0..class_count {
                if c != y && rng.gen::<f64>() < eta {
                    set.insert(c);
                }
            }
            set
        })
        .collect())
}

/// Applies the full flip-then-partial corruption to a clean dataset.
///
/// The clean labels and the flipped labels are retained as hidden audit
/// fields; training code must never read them.
pub fn corrupt_to_upll(clean: &LabeledDataset, mu: f64, eta: f64, seed: u64) -> Result<UpllDataset> {
    let flipped = corrupt_labels(&clean.labels, clean.class_count, mu, derive_seed(seed, 0))?;
    let candidates =
        generate_candidates(&flipped, clean.class_count, eta, derive_seed(seed, 1))?;
    Ok(UpllDataset {
        features: clean.features.clone(),
        candidates,
        hidden_truth: Some(clean.labels.clone()),
        hidden_flipped: Some(flipped),
        class_count: clean.class_count,
    })
}

/// Corruption statistics measured against the hidden labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub n: usize,
    /// Fraction of instances whose clean label is absent from the candidates.
    pub empirical_unreliable_rate: f64,
    /// `1 -` unreliable rate: how often the clean label survives.
    pub membership_rate: f64,
    /// Fraction of instances whose label was flipped, when that
    /// information was retained by generation.
    pub flip_rate: Option<f64>,
    pub mean_candidate_size: f64,
    /// `size_histogram[k]` counts candidate sets of size `k` (index 0 unused).
    pub size_histogram: Vec<usize>,
    /// Hidden-truth class counts.
    pub per_class_counts: Vec<usize>,
}

impl AuditReport {
    /// Deterministic key=value rendering for the audit file.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n = {}", self.n);
        let _ = writeln!(out, "unreliable_rate = {}", self.empirical_unreliable_rate);
        let _ = writeln!(out, "membership_rate = {}", self.membership_rate);
        match self.flip_rate {
            Some(r) => {
                let _ = writeln!(out, "flip_rate = {r}");
            }
            None => {
                let _ = writeln!(out, "flip_rate = unavailable");
            }
        }
        let _ = writeln!(out, "mean_candidate_size = {}", self.mean_candidate_size);
        for (size, count) in self.size_histogram.iter().enumerate().skip(1) {
            if *count > 0 {
                let _ = writeln!(out, "size[{size}] = {count}");
            }
        }
        for (class, count) in self.per_class_counts.iter().enumerate() {
            let _ = writeln!(out, "class[{class}] = {count}");
        }
        out
    }
}

/// Measures corruption statistics; requires hidden truth.
pub fn audit(upll: &UpllDataset) -> Result<AuditReport> {
    let truth = upll
        .hidden_truth
        .as_ref()
        .ok_or_else(|| Error::AuditUnavailable("dataset has no hidden truth".into()))?;
    let n = upll.len();
    if n == 0 {
        return Err(Error::Config("cannot audit an empty dataset".into()));
    }
    let mut missing = 0usize;
    let mut total_size = 0usize;
    let mut size_histogram = vec![0usize; upll.class_count + 1];
    let mut per_class_counts = vec![0usize; upll.class_count];
    for (&y, set) in truth.iter().zip(&upll.candidates) {
        if !set.contains(y) {
            missing += 1;
        }
        total_size += set.len();
        size_histogram[set.len()] += 1;
        per_class_counts[y] += 1;
    }
    let flip_rate = upll.hidden_flipped.as_ref().map(|flipped| {
        let flips = truth.iter().zip(flipped).filter(|(a, b)| a != b).count();
        flips as f64 / n as f64
    });
    let unreliable = missing as f64 / n as f64;
    Ok(AuditReport {
        n,
        empirical_unreliable_rate: unreliable,
        membership_rate: 1.0 - unreliable,
        flip_rate,
        mean_candidate_size: total_size as f64 / n as f64,
        size_histogram,
        per_class_counts,
    })
}

/// One training instance in the candidate-record file: the row index in
/// the features file, the candidate classes, and the hidden clean label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpllRecord {
    pub index: usize,
    pub candidates: CandidateSet,
    pub hidden_truth: Option<usize>,
}

/// Writes one record per line: `index<TAB>c1,c2,...<TAB>truth-or-null`,
/// candidates in ascending class order.
pub fn write_upll_records(path: &Path, records: &[UpllRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        let _ = write!(out, "{}\t", rec.index);
        for (i, c) in rec.candidates.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{c}");
        }
        match rec.hidden_truth {
            Some(y) => {
                let _ = write!(out, "\t{y}");
            }
            None => out.push_str("\tnull"),
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_upll_records(path: &Path) -> Result<Vec<UpllRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let row = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 3 {
            return Err(Error::DataFormat {
                row,
                col: cells.len(),
                msg: "records need index, candidates, truth".into(),
            });
        }
        let index = cells[0].parse().map_err(|_| Error::DataFormat {
            row,
            col: 1,
            msg: format!("bad index {:?}", cells[0]),
        })?;
        let mut candidates = CandidateSet::empty();
        for tok in cells[1].split(',') {
            let c: usize = tok.parse().map_err(|_| Error::DataFormat {
                row,
                col: 2,
                msg: format!("bad class {tok:?}"),
            })?;
            if c >= MAX_CLASSES {
                return Err(Error::DataFormat {
                    row,
                    col: 2,
                    msg: format!("class {c} exceeds the {MAX_CLASSES}-class limit"),
                });
            }
            candidates.insert(c);
        }
        if candidates.is_empty() {
            return Err(Error::DataFormat {
                row,
                col: 2,
                msg: "empty candidate set".into(),
            });
        }
        let hidden_truth = if cells[2] == "null" {
            None
        } else {
            Some(cells[2].parse().map_err(|_| Error::DataFormat {
                row,
                col: 3,
                msg: format!("bad truth {:?}", cells[2]),
            })?)
        };
        records.push(UpllRecord { index, candidates, hidden_truth });
    }
    Ok(records)
}
