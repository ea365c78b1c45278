//! Second-stage training.
//!
//! Three trainers share one optimization loop shape:
//!
//! - general: disambiguation-weighted cross-entropy on the reliable pool
//!   with per-epoch weight re-estimation, plus confidence-thresholded
//!   promotion of unreliable-pool instances into the reliable pool as
//!   singleton-candidate samples;
//! - augmented: non-candidate suppression plus a ramped KL consistency
//!   term over noise-augmented views, plus a weak/strong masked
//!   cross-entropy on the unreliable pool;
//! - baseline: plain candidate-averaged CCE or MAE on the full corrupted
//!   set, for comparison runs.
//!
//! All report the test accuracy at the epoch of best validation accuracy
//! (the model is snapshotted there) and stop after `patience` epochs
//! without a validation rise.

use std::io::{Read, Write as IoWrite};
use std::path::Path;
use std::time::Instant;

use rand::distributions::Distribution;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, LabeledDataset, UpllDataset};
use crate::error::{Error, Result};
use crate::losses::{
    cce_loss, kl_consistency_batch, mae_loss, pi_schedule, pseudo_label, sup_noncandidate_loss,
    total_augmented_loss, unreliable_loss, update_weights, update_weights_augmented, weighted_cce,
    PseudoLabel, WeightMatrix,
};
use crate::matrix::Matrix;
use crate::nn::{softmax, MlpModel, ModelSpec, OptimizerState};
use crate::seeding::derive_seed;
use crate::stopping::EarlyStopping;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    General,
    Augmented,
    BaselineCce,
    BaselineMae,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Self::General),
            "augmented" => Ok(Self::Augmented),
            "baseline_cce" => Ok(Self::BaselineCce),
            "baseline_mae" => Ok(Self::BaselineMae),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::General => "general",
            Self::Augmented => "augmented",
            Self::BaselineCce => "baseline_cce",
            Self::BaselineMae => "baseline_mae",
        }
    }
}

/// Gaussian-noise augmentation in standardized feature units.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub views: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { weak_sigma: 0.05, strong_sigma: 0.2, views: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub xi: f64,
    pub pi_max: f64,
    pub t_prime: usize,
    pub mode: TrainMode,
    pub augment: AugmentSpec,
    /// When false, the unreliable pool is ignored entirely (the
    /// `--no-unreliable` ablation).
    pub use_unreliable: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            patience: 25,
            lr: 5e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 256,
            tau: 0.95,
            xi: 2.0,
            pi_max: 1.0,
            t_prime: 100,
            mode: TrainMode::General,
            augment: AugmentSpec::default(),
            use_unreliable: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if self.xi < 0.0 {
            return Err(Error::Config(format!("xi must be >= 0, got {}", self.xi)));
        }
        if self.pi_max < 0.0 {
            return Err(Error::Config(format!("pi_max must be >= 0, got {}", self.pi_max)));
        }
        if self.t_prime == 0 {
            return Err(Error::Config("t_prime must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.augment.views == 0 {
            return Err(Error::Config("augment views must be >= 1".into()));
        }
        if self.augment.weak_sigma < 0.0 || self.augment.strong_sigma < 0.0 {
            return Err(Error::Config("augment sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

/// Reliable/unreliable index partition over a training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub reliable: Vec<usize>,
    pub unreliable: Vec<usize>,
}

impl Partition {
    /// Everything reliable: the `--no-rs` ablation.
    pub fn all_reliable(n: usize) -> Self {
        Self { reliable: (0..n).collect(), unreliable: Vec::new() }
    }
}

/// One structured metrics record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub promotions: usize,
    pub reliable_size: usize,
}

/// Final summary; wall time lives here and only here so the per-epoch
/// metrics stay byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc_at_best_val: f64,
    pub wall_time_seconds: f64,
}

/// Model snapshot at the best validation epoch plus the metrics log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub epochs: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

/// Top-1 accuracy with argmax ties resolved to the lowest class index.
pub fn evaluate(model: &MlpModel, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let n = dataset.len();
    let chunk = 1024;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let logits = model.forward(&dataset.features.gather_rows(&indices))?;
        for (row, &i) in (0..logits.rows()).zip(&indices) {
            let scores = logits.row(row);
            let mut best = 0;
            for (j, &s) in scores.iter().enumerate().skip(1) {
                if s > scores[best] {
                    best = j;
                }
            }
            if best == dataset.labels[i] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Adds seeded zero-mean Gaussian noise with per-feature scale `sigma`;
/// `sigma = 0` returns the row unchanged.
pub fn augment(features_row: &[f64], sigma: f64, seed: u64) -> Vec<f64> {
    if sigma <= 0.0 {
        return features_row.to_vec();
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated nonnegative");
    features_row.iter().map(|&v| v + normal.sample(&mut rng)).collect()
}

fn augment_matrix(features: &Matrix, sigma: f64, seed: u64) -> Matrix {
    if sigma <= 0.0 {
        return features.clone();
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated nonnegative");
    let mut out = features.clone();
    for v in out.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    out
}

/// Shared best-epoch bookkeeping.
struct BestTracker {
    stopper: EarlyStopping,
    best_epoch: usize,
    test_at_best: f64,
    snapshot: Option<MlpModel>,
}

impl BestTracker {
    fn new(patience: usize) -> Self {
        Self {
            stopper: EarlyStopping::new(patience, false),
            best_epoch: 0,
            test_at_best: 0.0,
            snapshot: None,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, val_acc: f64, test_acc: f64, model: &MlpModel) -> bool {
        let decision = self.stopper.observe(val_acc);
        if decision.improved {
            self.best_epoch = epoch;
            self.test_at_best = test_acc;
            self.snapshot = Some(model.clone());
        }
        decision.stop
    }

    fn finish(self, epochs: Vec<EpochRecord>, started: Instant) -> Result<TrainOutcome> {
        let model = self
            .snapshot
            .ok_or_else(|| Error::Invariant("training ran zero epochs".into()))?;
        Ok(TrainOutcome {
            model,
            epochs,
            summary: TrainSummary {
                best_epoch: self.best_epoch,
                best_val_acc: self.stopper.best(),
                test_acc_at_best_val: self.test_at_best,
                wall_time_seconds: started.elapsed().as_secs_f64(),
            },
        })
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

/// Algorithm 2: weighted-CCE disambiguation on the reliable pool with
/// per-epoch weight updates and pseudo-label promotion from the
/// unreliable pool.
pub fn train_general(
    train: &UpllDataset,
    partition: &Partition,
    val: &LabeledDataset,
    test: &LabeledDataset,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.mode != TrainMode::General {
        return Err(Error::Config(format!(
            "train_general called with mode {}",
            config.mode.as_str()
        )));
    }
    if partition.reliable.is_empty() {
        return Err(Error::Config("reliable pool is empty".into()));
    }
    let started = Instant::now();
    let class_count = train.class_count;

    let mut pool: Vec<usize> = partition.reliable.clone();
    let mut pool_candidates: Vec<CandidateSet> =
        pool.iter().map(|&i| train.candidates[i]).collect();
    let mut unreliable: Vec<usize> = if config.use_unreliable {
        partition.unreliable.clone()
    } else {
        Vec::new()
    };
    let mut weights = WeightMatrix::uniform(&pool_candidates, class_count)?;

    let dims = spec.layer_dims(train.features.cols(), class_count);
    let mut model = MlpModel::init(&dims, derive_seed(config.seed, 0))?;
    let mut opt = OptimizerState::new(
        &model,
        config.lr,
        config.momentum,
        config.weight_decay,
        config.max_epochs,
    )?;

    let mut tracker = BestTracker::new(config.patience);
    let mut records = Vec::new();

    for epoch in 0..config.max_epochs {
        let lr_now = opt.lr();
        let order = shuffled(pool.len(), derive_seed(config.seed, 1_000 + epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let train_indices: Vec<usize> = chunk.iter().map(|&p| pool[p]).collect();
            let batch = train.features.gather_rows(&train_indices);
            let batch_candidates: Vec<CandidateSet> =
                chunk.iter().map(|&p| pool_candidates[p]).collect();
            let batch_weights = weights.gather(chunk);
            let cache = model.forward_cached(&batch)?;
            let probs = softmax(cache.logits());
            let out = weighted_cce(&probs, &batch_candidates, &batch_weights)?;
            if !out.mean.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += out.per_sample.iter().sum::<f64>();
            let grads = model.backward(&cache, &out.grad_logits)?;
            opt.step(&mut model, &grads)?;
        }
        let train_loss = loss_sum / pool.len() as f64;

        // Weight re-estimation over the whole pool with end-of-epoch outputs.
        weights = refresh_weights(&model, train, &pool, &pool_candidates, config.batch_size)?;

        // Promotion: confident unreliable instances join the pool with a
        // singleton candidate set and a one-hot weight row.
        let mut promotions = 0usize;
        if !unreliable.is_empty() {
            let promoted = scan_pseudo_labels(&model, train, &unreliable, config.tau)?;
            if !promoted.is_empty() {
                let keep: Vec<usize> = {
                    let promoted_set: std::collections::HashSet<usize> =
                        promoted.iter().map(|p| p.index).collect();
                    unreliable
                        .iter()
                        .copied()
                        .filter(|i| !promoted_set.contains(i))
                        .collect()
                };
                for p in &promoted {
                    pool.push(p.index);
                    pool_candidates.push(CandidateSet::singleton(p.class));
                    weights =
                        weights.push_row(&WeightMatrix::one_hot_row(p.class, class_count))?;
                }
                promotions = promoted.len();
                unreliable = keep;
            }
        }

        let val_acc = evaluate(&model, val)?;
        let test_acc = evaluate(&model, test)?;
        records.push(EpochRecord {
            epoch,
            lr: lr_now,
            train_loss,
            val_acc,
            test_acc,
            promotions,
            reliable_size: pool.len(),
        });
        opt.advance_epoch();
        if tracker.observe(epoch, val_acc, test_acc, &model) {
            break;
        }
    }
    tracker.finish(records, started)
}

fn refresh_weights(
    model: &MlpModel,
    train: &UpllDataset,
    pool: &[usize],
    pool_candidates: &[CandidateSet],
    batch_size: usize,
) -> Result<WeightMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(pool.len());
    let mut start = 0;
    while start < pool.len() {
        let end = (start + batch_size).min(pool.len());
        let train_indices: Vec<usize> = pool[start..end].to_vec();
        let probs = softmax(&model.forward(&train.features.gather_rows(&train_indices))?);
        let updated = update_weights(&probs, &pool_candidates[start..end])?;
        for r in 0..updated.rows() {
            rows.push(updated.row(r).to_vec());
        }
        start = end;
    }
    let inner = Matrix::from_rows(&rows)?;
    WeightMatrix::from_matrix(inner, pool_candidates)
}

/// Scores the unreliable pool and returns the confident predictions in
/// pool order.
fn scan_pseudo_labels(
    model: &MlpModel,
    train: &UpllDataset,
    unreliable: &[usize],
    tau: f64,
) -> Result<Vec<PseudoLabel>> {
    let mut promoted = Vec::new();
    let mut start = 0;
    while start < unreliable.len() {
        let end = (start + 1024).min(unreliable.len());
        let chunk = &unreliable[start..end];
        let probs = softmax(&model.forward(&train.features.gather_rows(chunk))?);
        for (row, &idx) in chunk.iter().enumerate() {
            if let Some((class, confidence)) = pseudo_label(probs.row(row), tau) {
                promoted.push(PseudoLabel { index: idx, class, confidence });
            }
        }
        start = end;
    }
    Ok(promoted)
}

/// Algorithm 3: non-candidate suppression + ramped KL consistency over
/// augmented views on the reliable pool, plus weak/strong masked
/// cross-entropy on the unreliable pool, with geometric-mean weight
/// updates each epoch.
pub fn train_augmented(
    train: &UpllDataset,
    partition: &Partition,
    val: &LabeledDataset,
    test: &LabeledDataset,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.mode != TrainMode::Augmented {
        return Err(Error::Config(format!(
            "train_augmented called with mode {}",
            config.mode.as_str()
        )));
    }
    if partition.reliable.is_empty() {
        return Err(Error::Config("reliable pool is empty".into()));
    }
    let started = Instant::now();
    let class_count = train.class_count;

    let pool = partition.reliable.clone();
    let pool_candidates: Vec<CandidateSet> = pool.iter().map(|&i| train.candidates[i]).collect();
    let unreliable: Vec<usize> = if config.use_unreliable && config.xi > 0.0 {
        partition.unreliable.clone()
    } else {
        Vec::new()
    };
    let mut weights = WeightMatrix::uniform(&pool_candidates, class_count)?;

    let dims = spec.layer_dims(train.features.cols(), class_count);
    let mut model = MlpModel::init(&dims, derive_seed(config.seed, 0))?;
    let mut opt = OptimizerState::new(
        &model,
        config.lr,
        config.momentum,
        config.weight_decay,
        config.max_epochs,
    )?;

    let mut tracker = BestTracker::new(config.patience);
    let mut records = Vec::new();

    for epoch in 0..config.max_epochs {
        let lr_now = opt.lr();
        let pi_t = pi_schedule(epoch, config.t_prime, config.pi_max);
        let epoch_seed = derive_seed(config.seed, 2_000 + epoch as u64);
        let order = shuffled(pool.len(), derive_seed(epoch_seed, 0));
        let u_order = shuffled(unreliable.len(), derive_seed(epoch_seed, 1));
        let u_batches: Vec<&[usize]> = u_order.chunks(config.batch_size).collect();

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch_seed = derive_seed(epoch_seed, 100 + batch_idx as u64);
            let train_indices: Vec<usize> = chunk.iter().map(|&p| pool[p]).collect();
            let batch = train.features.gather_rows(&train_indices);
            let batch_candidates: Vec<CandidateSet> =
                chunk.iter().map(|&p| pool_candidates[p]).collect();
            let batch_weights = weights.gather(chunk);

            let cache = model.forward_cached(&batch)?;
            let probs = softmax(cache.logits());
            let (l_sup, g_sup) = sup_noncandidate_loss(&probs, &batch_candidates)?;
            let mut grads = model.backward(&cache, &g_sup)?;

            // Consistency term over strong-augmented views.
            let mut view_caches = Vec::with_capacity(config.augment.views);
            let mut view_probs = Vec::with_capacity(config.augment.views);
            for v in 0..config.augment.views {
                let z = augment_matrix(
                    &batch,
                    config.augment.strong_sigma,
                    derive_seed(batch_seed, v as u64),
                );
                let c = model.forward_cached(&z)?;
                view_probs.push(softmax(c.logits()));
                view_caches.push(c);
            }
            let (psi, view_grads) = kl_consistency_batch(&batch_weights, &view_probs)?;
            if pi_t > 0.0 {
                for (c, g) in view_caches.iter().zip(&view_grads) {
                    let vg = model.backward(c, g)?;
                    grads.add_scaled(&vg, pi_t);
                }
            }

            // Unreliable-pool term, cycling its batches.
            let mut l_u = 0.0;
            if !u_batches.is_empty() {
                let u_chunk = u_batches[batch_idx % u_batches.len()];
                let u_indices: Vec<usize> = u_chunk.iter().map(|&p| unreliable[p]).collect();
                let u_feats = train.features.gather_rows(&u_indices);
                let weak = augment_matrix(
                    &u_feats,
                    config.augment.weak_sigma,
                    derive_seed(batch_seed, 50),
                );
                let strong = augment_matrix(
                    &u_feats,
                    config.augment.strong_sigma,
                    derive_seed(batch_seed, 51),
                );
                let weak_probs = softmax(&model.forward(&weak)?);
                let strong_cache = model.forward_cached(&strong)?;
                let strong_probs = softmax(strong_cache.logits());
                let (value, g_u) = unreliable_loss(&weak_probs, &strong_probs, config.tau)?;
                l_u = value;
                let ug = model.backward(&strong_cache, &g_u)?;
                grads.add_scaled(&ug, config.xi);
            }

            let batch_total = total_augmented_loss(l_sup + pi_t * psi, l_u, config.xi);
            if !batch_total.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += batch_total * chunk.len() as f64;
            opt.step(&mut model, &grads)?;
        }
        let train_loss = loss_sum / pool.len() as f64;

        // Geometric-mean weight update over fresh augmented views.
        weights = refresh_weights_augmented(
            &model,
            train,
            &pool,
            &pool_candidates,
            &config.augment,
            config.batch_size,
            derive_seed(epoch_seed, 9_000),
        )?;

        let val_acc = evaluate(&model, val)?;
        let test_acc = evaluate(&model, test)?;
        records.push(EpochRecord {
            epoch,
            lr: lr_now,
            train_loss,
            val_acc,
            test_acc,
            promotions: 0,
            reliable_size: pool.len(),
        });
        opt.advance_epoch();
        if tracker.observe(epoch, val_acc, test_acc, &model) {
            break;
        }
    }
    tracker.finish(records, started)
}

fn refresh_weights_augmented(
    model: &MlpModel,
    train: &UpllDataset,
    pool: &[usize],
    pool_candidates: &[CandidateSet],
    augment_spec: &AugmentSpec,
    batch_size: usize,
    seed: u64,
) -> Result<WeightMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(pool.len());
    let mut start = 0;
    let mut block = 0u64;
    while start < pool.len() {
        let end = (start + batch_size).min(pool.len());
        let train_indices: Vec<usize> = pool[start..end].to_vec();
        let feats = train.features.gather_rows(&train_indices);
        let mut views = Vec::with_capacity(augment_spec.views);
        for v in 0..augment_spec.views {
            let z = augment_matrix(
                &feats,
                augment_spec.strong_sigma,
                derive_seed(seed, block * 64 + v as u64),
            );
            views.push(softmax(&model.forward(&z)?));
        }
        let updated = update_weights_augmented(&views, &pool_candidates[start..end])?;
        for r in 0..updated.rows() {
            rows.push(updated.row(r).to_vec());
        }
        start = end;
        block += 1;
    }
    let inner = Matrix::from_rows(&rows)?;
    WeightMatrix::from_matrix(inner, pool_candidates)
}

/// Single-stage baseline: CCE or MAE on the full corrupted training set.
pub fn train_baseline(
    train: &UpllDataset,
    val: &LabeledDataset,
    test: &LabeledDataset,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let use_mae = match config.mode {
        TrainMode::BaselineCce => false,
        TrainMode::BaselineMae => true,
        other => {
            return Err(Error::Config(format!(
                "train_baseline called with mode {}",
                other.as_str()
            )))
        }
    };
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let started = Instant::now();

    let dims = spec.layer_dims(train.features.cols(), train.class_count);
    let mut model = MlpModel::init(&dims, derive_seed(config.seed, 0))?;
    let mut opt = OptimizerState::new(
        &model,
        config.lr,
        config.momentum,
        config.weight_decay,
        config.max_epochs,
    )?;

    let mut tracker = BestTracker::new(config.patience);
    let mut records = Vec::new();
    let n = train.len();

    for epoch in 0..config.max_epochs {
        let lr_now = opt.lr();
        let order = shuffled(n, derive_seed(config.seed, 1_000 + epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.features.gather_rows(chunk);
            let batch_candidates: Vec<CandidateSet> =
                chunk.iter().map(|&i| train.candidates[i]).collect();
            let cache = model.forward_cached(&batch)?;
            let probs = softmax(cache.logits());
            let out = if use_mae {
                mae_loss(&probs, &batch_candidates)?
            } else {
                cce_loss(&probs, &batch_candidates)?
            };
            if !out.mean.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += out.per_sample.iter().sum::<f64>();
            let grads = model.backward(&cache, &out.grad_logits)?;
            opt.step(&mut model, &grads)?;
        }
        let train_loss = loss_sum / n as f64;

        let val_acc = evaluate(&model, val)?;
        let test_acc = evaluate(&model, test)?;
        records.push(EpochRecord {
            epoch,
            lr: lr_now,
            train_loss,
            val_acc,
            test_acc,
            promotions: 0,
            reliable_size: n,
        });
        opt.advance_epoch();
        if tracker.observe(epoch, val_acc, test_acc, &model) {
            break;
        }
    }
    tracker.finish(records, started)
}

/// Writes one JSON record per epoch.
pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::DataFormat {
                row: i + 1,
                col: 1,
                msg: format!("bad metrics record: {e}"),
            })
        })
        .collect()
}

pub fn write_summary(path: &Path, summary: &TrainSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

const MODEL_MAGIC: &[u8; 4] = b"UPLM";
const MODEL_VERSION: u32 = 1;

/// Little-endian binary model file: magic, version, layer dims, then per
/// layer the weight matrix and bias vector as `f64` arrays.
pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layer_dims().len() as u32).to_le_bytes());
    for &d in model.layer_dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (w, b) in model.weights().iter().zip(model.biases()) {
        for v in w.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::DataFormat {
                row: 0,
                col: *pos,
                msg: "model file truncated".into(),
            });
        }
        let slice = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };
    if take(&mut pos, 4)? != MODEL_MAGIC {
        return Err(Error::DataFormat { row: 0, col: 0, msg: "bad model magic".into() });
    }
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };
    let version = u32_at(&mut pos)?;
    if version != MODEL_VERSION {
        return Err(Error::DataFormat {
            row: 0,
            col: 4,
            msg: format!("unsupported model version {version}"),
        });
    }
    let n_dims = u32_at(&mut pos)? as usize;
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(u32_at(&mut pos)? as usize);
    }
    if dims.len() < 2 {
        return Err(Error::DataFormat { row: 0, col: 8, msg: "model needs >= 2 dims".into() });
    }
    let f64_at = |pos: &mut usize| -> Result<f64> {
        let s = take(pos, 8)?;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(s);
        Ok(f64::from_le_bytes(buf))
    };
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (rows, cols) = (pair[0], pair[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64_at(&mut pos)?);
        }
        weights.push(Matrix::from_vec(rows, cols, data)?);
        let mut bias = Vec::with_capacity(cols);
        for _ in 0..cols {
            bias.push(f64_at(&mut pos)?);
        }
        biases.push(bias);
    }
    if pos != bytes.len() {
        return Err(Error::DataFormat {
            row: 0,
            col: pos,
            msg: "trailing bytes in model file".into(),
        });
    }
    Ok(MlpModel::from_parts(dims, weights, biases))
}
