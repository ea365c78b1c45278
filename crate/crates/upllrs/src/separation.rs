//! Self-adaptive recursive separation.
//!
//! Each step trains a freshly initialized classifier for a few epochs on
//! the current reliable subset, ranks samples by their final-epoch loss,
//! moves the top fraction into the unreliable subset (dropping their
//! labels), and stops early once validation accuracy declines for
//! `patience` consecutive steps.

use std::fmt::Write as _;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::{CandidateSet, LabeledDataset, UpllDataset};
use crate::error::{Error, Result};
use crate::losses::cce_loss;
use crate::matrix::Matrix;
use crate::nn::{softmax, MlpModel, ModelSpec, OptimizerState};
use crate::seeding::derive_seed;
use crate::stopping::EarlyStopping;
use crate::trainer::evaluate;

/// Settings for one separation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationConfig {
    /// Epochs per separation step.
    pub beta: usize,
    /// Fraction of the current reliable subset excluded per step.
    pub gamma: f64,
    /// Consecutive validation declines tolerated before stopping.
    pub patience: usize,
    /// Step cap; `None` derives it from `gamma` via `max_steps`.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            beta: 5,
            gamma: 0.03,
            patience: 2,
            max_steps: None,
            lr: 0.1,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl SeparationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0,1), got {}", self.gamma)));
        }
        if self.beta == 0 {
            return Err(Error::Config("beta must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(0) = self.max_steps {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// The effective step cap.
    pub fn effective_max_steps(&self) -> Result<usize> {
        match self.max_steps {
            Some(m) => Ok(m),
            None => {
                let m = max_steps(self.gamma, 0.3)?;
                if m == 0 {
                    return Err(Error::Config(format!(
                        "gamma {} retains under 30% after a single step",
                        self.gamma
                    )));
                }
                Ok(m)
            }
        }
    }
}

/// One executed separation step (step 0 records the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub val_accuracy: f64,
    pub reliable_size: usize,
    /// Fraction of the remaining reliable subset whose hidden clean label
    /// is still inside its candidate set; present only when the dataset
    /// carries hidden truth.
    pub audited_purity: Option<f64>,
}

/// Output partition plus per-step history.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationResult {
    /// Indices (into the training set) retained as reliable.
    pub reliable_indices: Vec<usize>,
    /// Indices excluded along the way; their labels are discarded.
    pub unreliable_indices: Vec<usize>,
    pub history: Vec<StepRecord>,
}

/// Largest `k` with `(1-gamma)^k >= retain`, i.e.
/// `floor(log(retain) / log(1-gamma))`.
///
/// Computed by repeated multiplication so the bracketing property
/// `(1-gamma)^k >= retain > (1-gamma)^(k+1)` holds exactly in floating
/// point; the closed form is used only to bail out of absurdly small
/// `gamma`.
pub fn max_steps(gamma: f64, retain: f64) -> Result<usize> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must be in (0,1), got {gamma}")));
    }
    if !(retain > 0.0 && retain < 1.0) {
        return Err(Error::Config(format!("retain must be in (0,1), got {retain}")));
    }
    let q = 1.0 - gamma;
    let estimate = retain.ln() / q.ln();
    if estimate > 100_000.0 {
        return Ok(estimate.floor() as usize);
    }
    let mut k = 0usize;
    let mut product = 1.0f64;
    while product * q >= retain {
        product *= q;
        k += 1;
    }
    Ok(k)
}

/// Descending stable sort permutation; ties keep ascending input order.
pub fn rank_by_loss(per_sample_losses: &[f64]) -> Result<Vec<usize>> {
    if per_sample_losses.iter().any(|l| l.is_nan()) {
        return Err(Error::Invariant("NaN loss in ranking".into()));
    }
    let mut order: Vec<usize> = (0..per_sample_losses.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        per_sample_losses[b]
            .partial_cmp(&per_sample_losses[a])
            .expect("NaN ruled out")
            .then(a.cmp(&b))
    });
    Ok(order)
}

/// Removes the `max(1, floor(gamma * m))` highest-loss instances.
///
/// `ranked` is a permutation of positions into `reliable_indices`;
/// returns the surviving indices (original order) and the excluded ones
/// (rank order).
pub fn exclude_top_gamma(
    reliable_indices: &[usize],
    ranked: &[usize],
    gamma: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let m = reliable_indices.len();
    if ranked.len() != m {
        return Err(Error::Shape(format!("ranking covers {} of {m} instances", ranked.len())));
    }
    let k = removal_count(m, gamma);
    let mut drop = vec![false; m];
    let mut excluded = Vec::with_capacity(k);
    for &pos in &ranked[..k] {
        drop[pos] = true;
        excluded.push(reliable_indices[pos]);
    }
    let surviving = reliable_indices
        .iter()
        .enumerate()
        .filter(|(pos, _)| !drop[*pos])
        .map(|(_, &idx)| idx)
        .collect();
    Ok((surviving, excluded))
}

fn removal_count(m: usize, gamma: f64) -> usize {
    (((m as f64) * gamma).floor() as usize).max(1)
}

/// Trains a fresh model for `epochs` epochs of candidate-averaged
/// cross-entropy and returns it together with each sample's loss from the
/// final epoch (recorded at the batch it appeared in, before that batch's
/// update).
#[allow(clippy::too_many_arguments)]
pub fn train_and_final_losses(
    features: &Matrix,
    candidates: &[CandidateSet],
    class_count: usize,
    spec: &ModelSpec,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(MlpModel, Vec<f64>)> {
    let n = candidates.len();
    if n == 0 {
        return Err(Error::Config("cannot train on an empty subset".into()));
    }
    let dims = spec.layer_dims(features.cols(), class_count);
    let mut model = MlpModel::init(&dims, derive_seed(seed, 0))?;
    let mut opt = OptimizerState::new(&model, lr, 0.9, 1e-3, epochs)?;
    let mut final_losses = vec![0.0; n];
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, 1 + epoch as u64));
        order.shuffle(&mut rng);
        let last_epoch = epoch + 1 == epochs;
        for chunk in order.chunks(batch_size) {
            let batch = features.gather_rows(chunk);
            let batch_candidates: Vec<CandidateSet> =
                chunk.iter().map(|&i| candidates[i]).collect();
            let cache = model.forward_cached(&batch)?;
            let probs = softmax(cache.logits());
            let out = cce_loss(&probs, &batch_candidates)?;
            if !out.mean.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            if last_epoch {
                for (&i, &loss) in chunk.iter().zip(&out.per_sample) {
                    final_losses[i] = loss;
                }
            }
            let grads = model.backward(&cache, &out.grad_logits)?;
            opt.step(&mut model, &grads)?;
        }
        opt.advance_epoch();
    }
    Ok((model, final_losses))
}

/// Runs the full self-adaptive separation loop.
pub fn run_recursive_separation(
    train: &UpllDataset,
    val: &LabeledDataset,
    spec: &ModelSpec,
    config: &SeparationConfig,
) -> Result<SeparationResult> {
    config.validate()?;
    let lambda = config.effective_max_steps()?;
    let n = train.len();
    if n == 0 {
        return Err(Error::Config("cannot separate an empty training set".into()));
    }

    let flags = train.reliability_flags().ok();
    let purity_of = |indices: &[usize]| -> Option<f64> {
        flags.as_ref().map(|f| {
            indices.iter().filter(|&&i| f[i]).count() as f64 / indices.len().max(1) as f64
        })
    };

    let mut reliable: Vec<usize> = (0..n).collect();
    let mut unreliable: Vec<usize> = Vec::new();
    let mut history = vec![StepRecord {
        step: 0,
        val_accuracy: 0.0,
        reliable_size: n,
        audited_purity: purity_of(&reliable),
    }];
    let mut stopper = EarlyStopping::new(config.patience, true);

    for step in 1..=lambda {
        let k = removal_count(reliable.len(), config.gamma);
        if reliable.len() < k || reliable.len() - k < train.class_count {
            break; // exclusion would leave fewer samples than classes
        }

        let subset_features = train.features.gather_rows(&reliable);
        let subset_candidates: Vec<CandidateSet> =
            reliable.iter().map(|&i| train.candidates[i]).collect();
        let (model, losses) = train_and_final_losses(
            &subset_features,
            &subset_candidates,
            train.class_count,
            spec,
            config.beta,
            config.lr,
            config.batch_size,
            derive_seed(config.seed, step as u64),
        )?;

        let ranked = rank_by_loss(&losses)?;
        let (surviving, excluded) = exclude_top_gamma(&reliable, &ranked, config.gamma)?;
        unreliable.extend(excluded);
        reliable = surviving;

        let accuracy = evaluate(&model, val)?;
        history.push(StepRecord {
            step,
            val_accuracy: accuracy,
            reliable_size: reliable.len(),
            audited_purity: purity_of(&reliable),
        });
        if stopper.observe(accuracy).stop {
            break;
        }
    }

    Ok(SeparationResult { reliable_indices: reliable, unreliable_indices: unreliable, history })
}

fn fmt_indices(indices: &[usize]) -> String {
    let mut out = String::new();
    for (i, idx) in indices.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{idx}");
    }
    out
}

fn parse_indices(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse().map_err(|_| Error::DataFormat {
                row: 0,
                col: 0,
                msg: format!("bad index {tok:?}"),
            })
        })
        .collect()
}

/// Writes the partition and history as structured text.
pub fn write_separation(path: &Path, result: &SeparationResult) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "reliable: {}", fmt_indices(&result.reliable_indices));
    let _ = writeln!(out, "unreliable: {}", fmt_indices(&result.unreliable_indices));
    let _ = writeln!(out, "history: step,val_acc,reliable_size,purity");
    for rec in &result.history {
        let purity = rec.audited_purity.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            rec.step, rec.val_accuracy, rec.reliable_size, purity
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a file written by `write_separation`.
pub fn read_separation(path: &Path) -> Result<SeparationResult> {
    let text = std::fs::read_to_string(path)?;
    let mut reliable = None;
    let mut unreliable = None;
    let mut history = Vec::new();
    let mut in_history = false;
    for (line_no, line) in text.lines().enumerate() {
        let row = line_no + 1;
        if let Some(rest) = line.strip_prefix("reliable:") {
            reliable = Some(parse_indices(rest)?);
        } else if let Some(rest) = line.strip_prefix("unreliable:") {
            unreliable = Some(parse_indices(rest)?);
        } else if line.starts_with("history:") {
            in_history = true;
        } else if in_history && !line.trim().is_empty() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 4 {
                return Err(Error::DataFormat {
                    row,
                    col: cells.len(),
                    msg: "history rows need 4 fields".into(),
                });
            }
            let parse_f = |s: &str, col: usize| -> Result<f64> {
                s.parse().map_err(|_| Error::DataFormat {
                    row,
                    col,
                    msg: format!("bad number {s:?}"),
                })
            };
            history.push(StepRecord {
                step: cells[0].parse().map_err(|_| Error::DataFormat {
                    row,
                    col: 1,
                    msg: format!("bad step {:?}", cells[0]),
                })?,
                val_accuracy: parse_f(cells[1], 2)?,
                reliable_size: cells[2].parse().map_err(|_| Error::DataFormat {
                    row,
                    col: 3,
                    msg: format!("bad size {:?}", cells[2]),
                })?,
                audited_purity: if cells[3].is_empty() {
                    None
                } else {
                    Some(parse_f(cells[3], 4)?)
                },
            });
        }
    }
    Ok(SeparationResult {
        reliable_indices: reliable.ok_or(Error::DataFormat {
            row: 1,
            col: 1,
            msg: "missing reliable line".into(),
        })?,
        unreliable_indices: unreliable.ok_or(Error::DataFormat {
            row: 2,
            col: 1,
            msg: "missing unreliable line".into(),
        })?,
        history,
    })
}
