//! Loss functions, disambiguation-weight updates, and pseudo-labeling.
//!
//! Every loss here reports its value together with the analytic gradient
//! with respect to the *logits* that produced the probabilities, chained
//! through softmax. A shared probability floor keeps logs and
//! denominators defined when an output underflows.

use crate::data::CandidateSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor applied inside logs and normalization denominators.
pub const PROB_FLOOR: f64 = 1e-12;

/// Value, per-sample values, and logits-gradient of a batch loss.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub mean: f64,
    pub per_sample: Vec<f64>,
    pub grad_logits: Matrix,
}

/// Per-instance class confidences restricted to the candidate set.
///
/// Rows sum to one and entries outside the candidate set are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    inner: Matrix,
}

impl WeightMatrix {
    /// Uniform initialization: `1/|s_i|` on candidates, zero elsewhere.
    pub fn uniform(candidates: &[CandidateSet], class_count: usize) -> Result<Self> {
        let mut inner = Matrix::zeros(candidates.len(), class_count);
        for (i, set) in candidates.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Invariant(format!("empty candidate set at row {i}")));
            }
            let w = 1.0 / set.len() as f64;
            for j in set.iter() {
                inner.set(i, j, w);
            }
        }
        Ok(Self { inner })
    }

    /// Single row with weight one on `class`.
    pub fn one_hot_row(class: usize, class_count: usize) -> Vec<f64> {
        let mut row = vec![0.0; class_count];
        row[class] = 1.0;
        row
    }

    pub fn from_matrix(inner: Matrix, candidates: &[CandidateSet]) -> Result<Self> {
        let out = Self { inner };
        out.validate(candidates)?;
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.inner.rows()
    }

    pub fn class_count(&self) -> usize {
        self.inner.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.inner.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.inner
    }

    /// Appends a row (used when a pseudo-labeled instance joins the pool).
    pub fn push_row(&mut self, row: &[f64]) -> Result<Self> {
        if row.len() != self.inner.cols() {
            return Err(Error::Shape(format!(
                "weight row has {} entries, expected {}",
                row.len(),
                self.inner.cols()
            )));
        }
        let mut data = self.inner.as_slice().to_vec();
        data.extend_from_slice(row);
        let inner = Matrix::from_vec(self.inner.rows() + 1, self.inner.cols(), data)?;
        Ok(Self { inner })
    }

    /// Rows in the given index order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        Self { inner: self.inner.gather_rows(indices) }
    }

    /// Checks support, range, and row sums against the candidate sets.
    pub fn validate(&self, candidates: &[CandidateSet]) -> Result<()> {
        if candidates.len() != self.inner.rows() {
            return Err(Error::Shape(format!(
                "{} candidate sets for {} weight rows",
                candidates.len(),
                self.inner.rows()
            )));
        }
        for (i, set) in candidates.iter().enumerate() {
            let row = self.inner.row(i);
            let mut sum = 0.0;
            for (j, &w) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Invariant(format!("weight {w} out of [0,1] at ({i},{j})")));
                }
                if w > 0.0 && !set.contains(j) {
                    return Err(Error::Invariant(format!(
                        "weight {w} on non-candidate class {j} at row {i}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!("weight row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

fn ensure_probs(probs: &Matrix, context: &str) -> Result<()> {
    for r in 0..probs.rows() {
        let mut sum = 0.0;
        for &p in probs.row(r) {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Invariant(format!("bad probability {p} in {context}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invariant(format!(
                "{context}: probability row {r} sums to {sum}"
            )));
        }
    }
    Ok(())
}

fn check_batch(probs: &Matrix, candidates: &[CandidateSet], context: &str) -> Result<()> {
    ensure_probs(probs, context)?;
    if candidates.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{context}: {} candidate sets for {} rows",
            candidates.len(),
            probs.rows()
        )));
    }
    if let Some(i) = candidates.iter().position(CandidateSet::is_empty) {
        return Err(Error::Invariant(format!("{context}: empty candidate set at row {i}")));
    }
    Ok(())
}

fn floored_neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Shared kernel: per-sample weighted cross-entropy over the candidate
/// set, with the softmax gradient `(p_k - w_k) / m`.
fn weighted_cce_kernel(
    probs: &Matrix,
    candidates: &[CandidateSet],
    weight_row: impl Fn(usize) -> Vec<f64>,
) -> LossOutput {
    let (m, c) = (probs.rows(), probs.cols());
    let inv_m = 1.0 / m as f64;
    let mut per_sample = Vec::with_capacity(m);
    let mut grad = Matrix::zeros(m, c);
    let mut total = 0.0;
    for (i, set) in candidates.iter().enumerate() {
        let w = weight_row(i);
        let p = probs.row(i);
        let mut loss = 0.0;
        for j in set.iter() {
            if w[j] > 0.0 {
                loss += w[j] * floored_neg_log(p[j]);
            }
        }
        per_sample.push(loss);
        total += loss;
        let g = grad.row_mut(i);
        for k in 0..c {
            g[k] = (p[k] - w[k]) * inv_m;
        }
    }
    LossOutput { mean: total * inv_m, per_sample, grad_logits: grad }
}

/// Candidate-averaged categorical cross-entropy:
/// `(1/|s_i|) * sum_{j in s_i} -log p_j`, averaged over the batch.
pub fn cce_loss(probs: &Matrix, candidates: &[CandidateSet]) -> Result<LossOutput> {
    check_batch(probs, candidates, "cce_loss")?;
    let c = probs.cols();
    Ok(weighted_cce_kernel(probs, candidates, |i| {
        let mut w = vec![0.0; c];
        let u = 1.0 / candidates[i].len() as f64;
        for j in candidates[i].iter() {
            w[j] = u;
        }
        w
    }))
}

/// Candidate-averaged mean absolute error:
/// `(1/|s_i|) * sum_{j in s_i} ||p - e_j||_1 = (1/|s_i|) * sum_j 2(1 - p_j)`.
/// Bounded in `[0, 2]` per sample.
pub fn mae_loss(probs: &Matrix, candidates: &[CandidateSet]) -> Result<LossOutput> {
    check_batch(probs, candidates, "mae_loss")?;
    let (m, c) = (probs.rows(), probs.cols());
    let inv_m = 1.0 / m as f64;
    let mut per_sample = Vec::with_capacity(m);
    let mut grad = Matrix::zeros(m, c);
    let mut total = 0.0;
    for (i, set) in candidates.iter().enumerate() {
        let p = probs.row(i);
        let inv_s = 1.0 / set.len() as f64;
        let mut loss = 0.0;
        let mut cand_mass = 0.0;
        for j in set.iter() {
            loss += 2.0 * (1.0 - p[j]) * inv_s;
            cand_mass += p[j];
        }
        per_sample.push(loss);
        total += loss;
        // d/dz_k of the sample loss: (2/|s|) * p_k * (cand_mass - [k in s]).
        let g = grad.row_mut(i);
        for k in 0..c {
            let indicator = if set.contains(k) { 1.0 } else { 0.0 };
            g[k] = 2.0 * inv_s * p[k] * (cand_mass - indicator) * inv_m;
        }
    }
    Ok(LossOutput { mean: total * inv_m, per_sample, grad_logits: grad })
}

/// Disambiguation-weighted cross-entropy:
/// `(1/m) * sum_i sum_{j in s_i} w_ij * (-log p_j)`.
pub fn weighted_cce(
    probs: &Matrix,
    candidates: &[CandidateSet],
    weights: &WeightMatrix,
) -> Result<LossOutput> {
    check_batch(probs, candidates, "weighted_cce")?;
    weights.validate(candidates)?;
    Ok(weighted_cce_kernel(probs, candidates, |i| weights.row(i).to_vec()))
}

/// Re-estimates weights from model outputs:
/// `w_ij = p_j / sum_{k in s_i} p_k` on candidates, zero elsewhere.
pub fn update_weights(probs: &Matrix, candidates: &[CandidateSet]) -> Result<WeightMatrix> {
    check_batch(probs, candidates, "update_weights")?;
    let mut inner = Matrix::zeros(probs.rows(), probs.cols());
    for (i, set) in candidates.iter().enumerate() {
        let p = probs.row(i);
        let denom: f64 = set.iter().map(|j| p[j].max(PROB_FLOOR)).sum();
        for j in set.iter() {
            inner.set(i, j, p[j].max(PROB_FLOOR) / denom);
        }
    }
    Ok(WeightMatrix { inner })
}

/// Weight update from several augmented views: the geometric mean of the
/// per-view outputs, normalized over the candidate set. Computed in
/// log-space; a single view reduces to `update_weights` exactly.
pub fn update_weights_augmented(
    probs_per_view: &[Matrix],
    candidates: &[CandidateSet],
) -> Result<WeightMatrix> {
    let first = probs_per_view
        .first()
        .ok_or_else(|| Error::Config("need at least one augmented view".into()))?;
    if probs_per_view.len() == 1 {
        return update_weights(first, candidates);
    }
    for v in probs_per_view {
        check_batch(v, candidates, "update_weights_augmented")?;
        if v.rows() != first.rows() || v.cols() != first.cols() {
            return Err(Error::Shape("augmented views disagree in shape".into()));
        }
    }
    let inv_views = 1.0 / probs_per_view.len() as f64;
    let mut inner = Matrix::zeros(first.rows(), first.cols());
    let mut log_means: Vec<(usize, f64)> = Vec::new();
    for (i, set) in candidates.iter().enumerate() {
        log_means.clear();
        let mut max_log = f64::NEG_INFINITY;
        for j in set.iter() {
            let mut acc = 0.0;
            for v in probs_per_view {
                acc += v.get(i, j).max(PROB_FLOOR).ln();
            }
            let log_mean = acc * inv_views;
            max_log = max_log.max(log_mean);
            log_means.push((j, log_mean));
        }
        let denom: f64 = log_means.iter().map(|(_, l)| (l - max_log).exp()).sum();
        for &(j, l) in &log_means {
            inner.set(i, j, (l - max_log).exp() / denom);
        }
    }
    Ok(WeightMatrix { inner })
}

/// Non-candidate suppression: `-sum_{k not in s} log(1 - p_k)` per sample,
/// averaged over the batch. Log arguments are floored.
pub fn sup_noncandidate_loss(
    probs: &Matrix,
    candidates: &[CandidateSet],
) -> Result<(f64, Matrix)> {
    check_batch(probs, candidates, "sup_noncandidate_loss")?;
    let (m, c) = (probs.rows(), probs.cols());
    let inv_m = 1.0 / m as f64;
    let mut grad = Matrix::zeros(m, c);
    let mut total = 0.0;
    for (i, set) in candidates.iter().enumerate() {
        let p = probs.row(i);
        // dL/dp_l = 1/(1 - p_l) on non-candidates, zero where floored.
        let mut dloss_dp = vec![0.0; c];
        for l in 0..c {
            if set.contains(l) {
                continue;
            }
            let one_minus = 1.0 - p[l];
            total += -one_minus.max(PROB_FLOOR).ln();
            if one_minus > PROB_FLOOR {
                dloss_dp[l] = 1.0 / one_minus;
            }
        }
        let dot: f64 = dloss_dp.iter().zip(p).map(|(g, &pk)| g * pk).sum();
        let grow = grad.row_mut(i);
        for k in 0..c {
            grow[k] = p[k] * (dloss_dp[k] - dot) * inv_m;
        }
    }
    Ok((total * inv_m, grad))
}

/// One sample's consistency term: `sum_views KL(w || p_view)`, with
/// `0 * log 0 := 0` and floored view probabilities. Returns the value and
/// the gradient with respect to each view's logits row (that is,
/// `p_view - w` wherever the floor is inactive).
pub fn kl_consistency(weights_row: &[f64], probs_per_view: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    let c = weights_row.len();
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(probs_per_view.len());
    for view in probs_per_view {
        let mut dloss_dp = vec![0.0; c];
        for j in 0..c {
            let w = weights_row[j];
            if w <= 0.0 {
                continue;
            }
            let p = view[j];
            value += w * (w.ln() - p.max(PROB_FLOOR).ln());
            if p > PROB_FLOOR {
                dloss_dp[j] = -w / p;
            }
        }
        let dot: f64 = dloss_dp.iter().zip(*view).map(|(g, &pk)| g * pk).sum();
        let grad: Vec<f64> = (0..c).map(|k| view[k] * (dloss_dp[k] - dot)).collect();
        grads.push(grad);
    }
    (value, grads)
}

/// Batch form of `kl_consistency`: mean over rows, one gradient matrix
/// per view.
pub fn kl_consistency_batch(
    weights: &WeightMatrix,
    probs_per_view: &[Matrix],
) -> Result<(f64, Vec<Matrix>)> {
    let m = weights.rows();
    for v in probs_per_view {
        ensure_probs(v, "kl_consistency_batch")?;
        if v.rows() != m || v.cols() != weights.class_count() {
            return Err(Error::Shape("view shape does not match weights".into()));
        }
    }
    let inv_m = 1.0 / m as f64;
    let mut total = 0.0;
    let mut grads: Vec<Matrix> =
        probs_per_view.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect();
    for i in 0..m {
        let views: Vec<&[f64]> = probs_per_view.iter().map(|v| v.row(i)).collect();
        let (value, row_grads) = kl_consistency(weights.row(i), &views);
        total += value;
        for (g, rg) in grads.iter_mut().zip(row_grads) {
            for (dst, src) in g.row_mut(i).iter_mut().zip(rg) {
                *dst = src * inv_m;
            }
        }
    }
    Ok((total * inv_m, grads))
}

/// Linear warmup of the consistency coefficient: `min(t*pi/T', pi)`.
pub fn pi_schedule(t: usize, t_prime: usize, pi_max: f64) -> f64 {
    (t as f64 * pi_max / t_prime as f64).min(pi_max)
}

/// A confident model prediction promoted to a hard label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub index: usize,
    pub class: usize,
    pub confidence: f64,
}

/// Argmax class if its probability reaches `tau`; ties go to the lowest
/// class index.
pub fn pseudo_label(probs_row: &[f64], tau: f64) -> Option<(usize, f64)> {
    let mut best = 0;
    let mut best_p = probs_row[0];
    for (j, &p) in probs_row.iter().enumerate().skip(1) {
        if p > best_p {
            best = j;
            best_p = p;
        }
    }
    (best_p >= tau).then_some((best, best_p))
}

/// Confidence-masked cross-entropy between weak and strong views:
/// samples whose weak-view confidence reaches `tau` contribute
/// `-log p_strong[argmax weak]`; the mean is over the whole batch, and
/// no gradient flows through the weak view.
pub fn unreliable_loss(
    weak_probs: &Matrix,
    strong_probs: &Matrix,
    tau: f64,
) -> Result<(f64, Matrix)> {
    ensure_probs(weak_probs, "unreliable_loss weak")?;
    ensure_probs(strong_probs, "unreliable_loss strong")?;
    if weak_probs.rows() != strong_probs.rows() || weak_probs.cols() != strong_probs.cols() {
        return Err(Error::Shape("weak and strong views disagree in shape".into()));
    }
    let (m, c) = (strong_probs.rows(), strong_probs.cols());
    let inv_m = 1.0 / m as f64;
    let mut grad = Matrix::zeros(m, c);
    let mut total = 0.0;
    for i in 0..m {
        let Some((target, _)) = pseudo_label(weak_probs.row(i), tau) else {
            continue;
        };
        let p = strong_probs.row(i);
        total += floored_neg_log(p[target]);
        let g = grad.row_mut(i);
        for k in 0..c {
            let indicator = if k == target { 1.0 } else { 0.0 };
            g[k] = (p[k] - indicator) * inv_m;
        }
    }
    Ok((total * inv_m, grad))
}

/// Combined objective of the augmented solution: `L_PLL + xi * L_U`.
pub fn total_augmented_loss(l_pll: f64, l_u: f64, xi: f64) -> f64 {
    l_pll + xi * l_u
}

/// The PLL part of the augmented objective: `L_Sup + pi(t) * Psi`.
pub fn pll_loss_value(l_sup: f64, pi_t: f64, psi: f64) -> f64 {
    l_sup + pi_t * psi
}
