//! Multilayer perceptron with hand-derived backpropagation.
//!
//! The network is a stack of dense layers with ReLU on hidden layers and
//! an identity output layer. Losses produce gradients with respect to the
//! output logits; `backward` chains them through the stack, and
//! `OptimizerState` applies SGD with momentum, weight decay, and cosine
//! learning-rate decay.

use rand::distributions::{Distribution, Uniform};
use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Dense feed-forward network: weights are `(in_dim x out_dim)` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Hidden-layer widths; the input and class dimensions come from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    /// Five dense layers, matching the perceptron backbone used throughout.
    pub fn default_mlp() -> Self {
        Self { hidden: vec![512, 256, 128, 64] }
    }

    pub fn layer_dims(&self, input_dim: usize, class_count: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(class_count);
        dims
    }
}

/// Per-sample activations retained for backpropagation.
pub struct ForwardCache {
    /// `post[0]` is the input batch; `post[l]` the post-activation output
    /// of layer `l-1`. The last entry holds the logits.
    post: Vec<Matrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        self.post.last().expect("cache holds at least the input")
    }
}

/// Parameter gradients with the same shapes as the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += scale * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

impl MlpModel {
    /// He-uniform initialization: weights in `(-sqrt(6/fan_in), +sqrt(6/fan_in))`,
    /// biases zero. Deterministic for a given seed.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "model needs at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config(format!("zero layer dim in {layer_dims:?}")));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new(-limit, limit);
            let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            weights.push(Matrix::from_vec(fan_in, fan_out, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self { layer_dims: layer_dims.to_vec(), weights, biases })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().expect("nonempty dims")
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub(crate) fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
    ) -> Self {
        Self { layer_dims, weights, biases }
    }

    /// Logits for a batch: pure function of `(self, batch)`.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        let cache = self.forward_cached(batch)?;
        Ok(cache.post.into_iter().last().expect("nonempty cache"))
    }

    /// Forward pass keeping per-layer activations for `backward`.
    pub fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n_layers = self.weights.len();
        let mut post = Vec::with_capacity(n_layers + 1);
        post.push(batch.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = post[l].matmul(w)?;
            let last = l + 1 == n_layers;
            for r in 0..z.rows() {
                let row = z.row_mut(r);
                for (v, bias) in row.iter_mut().zip(b) {
                    *v += bias;
                    if !last && *v < 0.0 {
                        *v = 0.0; // ReLU on hidden layers
                    }
                }
            }
            post.push(z);
        }
        post.last()
            .expect("nonempty")
            .ensure_finite("forward logits")?;
        Ok(ForwardCache { post })
    }

    /// Backpropagates a logits gradient through every layer.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Gradients> {
        let logits = cache.logits();
        if grad_logits.rows() != logits.rows() || grad_logits.cols() != logits.cols() {
            return Err(Error::Shape(format!(
                "gradient is {}x{}, logits are {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                logits.rows(),
                logits.cols()
            )));
        }
        let n_layers = self.weights.len();
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_logits.clone();
        for l in (0..n_layers).rev() {
            let input = &cache.post[l];
            // dW = input^T . delta ; db = column sums of delta
            grads.weights[l] = input.transpose_matmul(&delta)?;
            let db = &mut grads.biases[l];
            for r in 0..delta.rows() {
                for (acc, &d) in db.iter_mut().zip(delta.row(r)) {
                    *acc += d;
                }
            }
            if l > 0 {
                let mut upstream = delta.matmul_transpose(&self.weights[l])?;
                // ReLU mask: the stored post-activation is zero exactly
                // where the unit was clamped.
                let act = &cache.post[l];
                for r in 0..upstream.rows() {
                    let row = upstream.row_mut(r);
                    for (u, &a) in row.iter_mut().zip(act.row(r)) {
                        if a <= 0.0 {
                            *u = 0.0;
                        }
                    }
                }
                delta = upstream;
            }
        }
        Ok(grads)
    }
}

/// Cosine decay: `base_lr * 0.5 * (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(epoch: usize, total: usize, base_lr: f64) -> f64 {
    let t = epoch as f64 / total as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// the decay term joins the gradient before the momentum update.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    momentum_w: Vec<Matrix>,
    momentum_b: Vec<Vec<f64>>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub current_epoch: usize,
    pub total_epochs: usize,
}

impl OptimizerState {
    pub fn new(
        model: &MlpModel,
        base_lr: f64,
        momentum: f64,
        weight_decay: f64,
        total_epochs: usize,
    ) -> Result<Self> {
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be > 0, got {base_lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {momentum}")));
        }
        if total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        Ok(Self {
            momentum_w: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            momentum_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            base_lr,
            momentum,
            weight_decay,
            current_epoch: 0,
            total_epochs,
        })
    }

    /// Learning rate for the current epoch under cosine decay.
    pub fn lr(&self) -> f64 {
        cosine_lr(self.current_epoch, self.total_epochs, self.base_lr)
    }

    pub fn advance_epoch(&mut self) {
        self.current_epoch += 1;
    }

    /// `v <- momentum*v + (g + wd*p)`, then `p <- p - lr*v`.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        let lr = self.lr();
        for l in 0..model.weights.len() {
            let w = model.weights[l].as_mut_slice();
            let g = grads.weights[l].as_slice();
            let v = self.momentum_w[l].as_mut_slice();
            if w.len() != g.len() {
                return Err(Error::Shape("gradient/parameter shape mismatch".into()));
            }
            for ((p, &grad), vel) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                let g_full = grad + self.weight_decay * *p;
                *vel = self.momentum * *vel + g_full;
                *p -= lr * *vel;
            }
            let b = &mut model.biases[l];
            let gb = &grads.biases[l];
            let vb = &mut self.momentum_b[l];
            for ((p, &grad), vel) in b.iter_mut().zip(gb).zip(vb.iter_mut()) {
                let g_full = grad + self.weight_decay * *p;
                *vel = self.momentum * *vel + g_full;
                *p -= lr * *vel;
            }
            model.weights[l].ensure_finite("parameters after step")?;
        }
        Ok(())
    }
}

/// Backpropagates `loss_gradient_wrt_logits` for `batch` and applies one
/// optimizer step in place.
pub fn backward_and_step(
    model: &mut MlpModel,
    opt_state: &mut OptimizerState,
    batch: &Matrix,
    loss_gradient_wrt_logits: &Matrix,
) -> Result<()> {
    let cache = model.forward_cached(batch)?;
    let grads = model.backward(&cache, loss_gradient_wrt_logits)?;
    opt_state.step(model, &grads)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // index-style oracles read like the formulas
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn init_respects_bounds_and_seed() {
        let m = MlpModel::init(&[4, 3], 0).unwrap();
        assert_eq!(m.weights().len(), 1);
        assert_eq!(m.weights()[0].as_slice().len(), 12);
        assert_eq!(m.biases()[0], vec![0.0; 3]);
        let limit = (6.0_f64 / 4.0).sqrt();
        assert!(m.weights()[0].as_slice().iter().all(|w| w.abs() < limit));

        let m2 = MlpModel::init(&[4, 3], 0).unwrap();
        assert_eq!(m, m2);
        let m3 = MlpModel::init(&[4, 3], 1).unwrap();
        assert_ne!(m, m3);
    }

    #[test]
    fn init_rejects_single_dim() {
        assert!(matches!(MlpModel::init(&[4], 0), Err(Error::Config(_))));
        assert!(matches!(MlpModel::init(&[4, 0, 2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_zero_model_gives_zero_logits() {
        let mut m = MlpModel::init(&[3, 4, 2], 9).unwrap();
        for w in &mut m.weights {
            w.as_mut_slice().fill(0.0);
        }
        let batch = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let logits = m.forward(&batch).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_identity_layer_passes_input_through() {
        let mut m = MlpModel::init(&[2, 2], 1).unwrap();
        m.weights[0] = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let logits = m.forward(&batch).unwrap();
        assert_eq!(logits.as_slice(), &[1.0, 2.0]);
    }

    /// Independent scalar-loop recomputation of the affine+ReLU chain.
    fn forward_oracle(m: &MlpModel, batch: &Matrix) -> Matrix {
        let n_layers = m.weights().len();
        let mut act: Vec<Vec<f64>> = (0..batch.rows()).map(|r| batch.row(r).to_vec()).collect();
        for (l, (w, b)) in m.weights().iter().zip(m.biases()).enumerate() {
            let mut next = Vec::with_capacity(act.len());
            for row in &act {
                let mut out = vec![0.0; w.cols()];
                for (j, o) in out.iter_mut().enumerate() {
                    let mut sum = b[j];
                    for (i, &x) in row.iter().enumerate() {
                        sum += x * w.get(i, j);
                    }
                    *o = if l + 1 < n_layers && sum < 0.0 { 0.0 } else { sum };
                }
                next.push(out);
            }
            act = next;
        }
        Matrix::from_rows(&act).unwrap()
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let m = MlpModel::init(&[4, 5, 3], 42).unwrap();
        let batch = Matrix::from_vec(
            3,
            4,
            vec![0.1, -0.2, 0.3, 0.4, -1.0, 2.0, -3.0, 4.0, 0.0, 0.0, 1.0, -1.0],
        )
        .unwrap();
        let got = m.forward(&batch).unwrap();
        let want = forward_oracle(&m, &batch);
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!(close(*a, *b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = MlpModel::init(&[4, 8, 3], 7).unwrap();
        let batch = Matrix::from_vec(2, 4, vec![0.3; 8]).unwrap();
        let a = m.forward(&batch).unwrap();
        let b = m.forward(&batch).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = MlpModel::init(&[4, 3], 0).unwrap();
        let batch = Matrix::zeros(1, 3);
        assert!(matches!(m.forward(&batch), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let z = Matrix::zeros(1, 4);
        let p = softmax(&z);
        for &v in p.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let big = Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let p = softmax(&big);
        assert!(p.get(0, 0) > 1.0 - 1e-12);
        assert!(p.get(0, 1) < 1e-12);
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let z = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax(&z);
        let denom: f64 = (1.0_f64).exp() + (2.0_f64).exp() + (3.0_f64).exp();
        for (j, &v) in p.as_slice().iter().enumerate() {
            let want = ((j + 1) as f64).exp() / denom;
            assert!(close(v, want, 1e-14));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_logits() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-1e4..1e4)).collect();
            let p = softmax(&Matrix::from_vec(1, 6, vals).unwrap());
            let sum: f64 = p.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn cosine_lr_endpoints_and_monotone() {
        assert!((cosine_lr(0, 10, 0.1) - 0.1).abs() < 1e-15);
        assert!(cosine_lr(10, 10, 0.1).abs() < 1e-15);
        assert!((cosine_lr(5, 10, 0.1) - 0.05).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = cosine_lr(e, 100, 0.5);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_step_changes_params_by_weight_decay_only() {
        let mut m = MlpModel::init(&[2, 2], 3).unwrap();
        let before = m.weights()[0].as_slice().to_vec();
        let mut opt = OptimizerState::new(&m, 0.1, 0.9, 1e-3, 10).unwrap();
        let grads = Gradients::zeros_like(&m);
        opt.step(&mut m, &grads).unwrap();
        for (after, &b) in m.weights()[0].as_slice().iter().zip(&before) {
            let want = b - 0.1 * (1e-3 * b);
            assert!((after - want).abs() < 1e-15);
        }
    }

    #[test]
    fn single_layer_update_matches_hand_derivation() {
        // One linear layer, one sample: dW = x^T g, db = g,
        // v = g + wd*W, W' = W - lr*v with zero momentum history.
        let mut m = MlpModel::init(&[2, 2], 5).unwrap();
        m.weights[0] = Matrix::from_vec(2, 2, vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        m.biases[0] = vec![0.1, -0.2];
        let x = Matrix::from_vec(1, 2, vec![2.0, -3.0]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![0.4, -0.6]).unwrap();

        let wd = 1e-3;
        let lr_expected = cosine_lr(0, 10, 0.05);
        let w_before = m.weights[0].clone();
        let b_before = m.biases[0].clone();

        let mut opt = OptimizerState::new(&m, 0.05, 0.9, wd, 10).unwrap();
        backward_and_step(&mut m, &mut opt, &x, &g).unwrap();

        for i in 0..2 {
            for j in 0..2 {
                let dw = x.get(0, i) * g.get(0, j) + wd * w_before.get(i, j);
                let want = w_before.get(i, j) - lr_expected * dw;
                assert!(
                    (m.weights[0].get(i, j) - want).abs() < 1e-15,
                    "weight ({i},{j})"
                );
            }
        }
        for j in 0..2 {
            let db = g.get(0, j) + wd * b_before[j];
            let want = b_before[j] - lr_expected * db;
            assert!((m.biases[0][j] - want).abs() < 1e-15, "bias {j}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        use crate::data::CandidateSet;
        use crate::losses::cce_loss;
        use rand::Rng;

        // Central differences with eps = 1e-5 over every weight and bias
        // of a 3-layer net, against the backpropagated gradients of the
        // candidate-averaged cross-entropy.
        let dims = [4usize, 6, 5, 3];
        let eps = 1e-5;
        for seed in 0..100u64 {
            let mut rng = StdRng::seed_from_u64(10_000 + seed);
            // Jitter the zero-init biases so no ReLU pre-activation sits
            // exactly on its kink (where the subgradient and central
            // differences legitimately disagree).
            let model = {
                let m = MlpModel::init(&dims, seed).unwrap();
                let weights = m.weights().to_vec();
                let biases = m
                    .biases()
                    .iter()
                    .map(|b| b.iter().map(|_| rng.gen_range(-0.3..0.3)).collect())
                    .collect();
                MlpModel::from_parts(dims.to_vec(), weights, biases)
            };
            let batch = Matrix::from_vec(
                2,
                4,
                (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            )
            .unwrap();
            let candidates: Vec<CandidateSet> = (0..2)
                .map(|_| {
                    let mut s = CandidateSet::singleton(rng.gen_range(0..3));
                    if rng.gen::<bool>() {
                        s.insert(rng.gen_range(0..3));
                    }
                    s
                })
                .collect();

            let loss_of = |m: &MlpModel| -> f64 {
                let probs = softmax(&m.forward(&batch).unwrap());
                cce_loss(&probs, &candidates).unwrap().mean
            };

            let cache = model.forward_cached(&batch).unwrap();
            let probs = softmax(cache.logits());
            let out = cce_loss(&probs, &candidates).unwrap();
            let grads = model.backward(&cache, &out.grad_logits).unwrap();

            let perturbed = |layer: usize, weight_idx: Option<(usize, usize)>, bias_idx: Option<usize>, delta: f64| {
                let mut weights = model.weights().to_vec();
                let mut biases = model.biases().to_vec();
                if let Some((r, c)) = weight_idx {
                    let old = weights[layer].get(r, c);
                    weights[layer].set(r, c, old + delta);
                }
                if let Some(j) = bias_idx {
                    biases[layer][j] += delta;
                }
                MlpModel::from_parts(dims.to_vec(), weights, biases)
            };

            for layer in 0..3 {
                let w = &model.weights()[layer];
                for r in 0..w.rows() {
                    for c in 0..w.cols() {
                        let plus = loss_of(&perturbed(layer, Some((r, c)), None, eps));
                        let minus = loss_of(&perturbed(layer, Some((r, c)), None, -eps));
                        let numeric = (plus - minus) / (2.0 * eps);
                        let analytic = grads.weights[layer].get(r, c);
                        let denom = analytic.abs().max(numeric.abs());
                        if denom > 1e-10 {
                            assert!(
                                (analytic - numeric).abs() / denom < 1e-4,
                                "seed {seed} layer {layer} w({r},{c}): {analytic} vs {numeric}"
                            );
                        }
                    }
                }
                for j in 0..model.biases()[layer].len() {
                    let plus = loss_of(&perturbed(layer, None, Some(j), eps));
                    let minus = loss_of(&perturbed(layer, None, Some(j), -eps));
                    let numeric = (plus - minus) / (2.0 * eps);
                    let analytic = grads.biases[layer][j];
                    let denom = analytic.abs().max(numeric.abs());
                    if denom > 1e-10 {
                        assert!(
                            (analytic - numeric).abs() / denom < 1e-4,
                            "seed {seed} layer {layer} b({j}): {analytic} vs {numeric}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let m = MlpModel::init(&[2, 3], 0).unwrap();
        let batch = Matrix::zeros(2, 2);
        let cache = m.forward_cached(&batch).unwrap();
        let bad = Matrix::zeros(2, 2);
        assert!(matches!(m.backward(&cache, &bad), Err(Error::Shape(_))));
    }
}
