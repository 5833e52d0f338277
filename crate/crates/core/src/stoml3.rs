//! Streaming stochastic majorization-minimization trainer for the ML3 softmax
//! objective.
//!
//! Each update keeps three running averages with weight `1/√t`:
//! softmax-weighted score gradients `A`, true-class score gradients `B`, and past
//! iterates `W̄`. The new prototypes are the closed-form minimizer of the averaged
//! surrogates, `W = (W̄ − A + B) / (1 + λ)`.

use std::time::Instant;

use log::{info, warn};
use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::ExampleSource;
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::ml3::{loss_gradient, softmax_loss, Forward, PrototypeTensor, SmoothnessQ};

/// Lipschitz constant of the surrogate's proximal term. The closed-form update
/// is the surrogate minimizer for exactly this value.
pub const SURROGATE_L: f64 = 1.0;

/// Default half-width of the uniform prototype initialization.
pub const DEFAULT_INIT_SCALE: f64 = 0.01;

/// Batches at least this large compute their per-example terms in parallel.
const PARALLEL_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct TrainerState {
    /// Running average of softmax-weighted score gradients, shape `(c, k, d)`.
    pub a: Array3<f64>,
    /// Running average of true-class score gradients.
    pub b: Array3<f64>,
    /// Running average of past iterates.
    pub wbar: Array3<f64>,
    /// Current prototypes (carries `q` and `λ`).
    pub w: PrototypeTensor,
    /// Number of updates applied so far.
    pub t: u64,
    pub seed: u64,
    norm_warned: bool,
    fresh_a: Array3<f64>,
    fresh_b: Array3<f64>,
}

impl TrainerState {
    /// Zeroed statistics and `W⁰ ~ U[−init_scale, init_scale]` from a seeded ChaCha stream.
    pub fn new(
        d: usize,
        k: usize,
        c: usize,
        lambda: f64,
        q: SmoothnessQ,
        init_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 || k == 0 || c == 0 {
            return invalid_param(format!("dimensions must be positive (d={d}, k={k}, c={c})"));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return invalid_param(format!("lambda must be a finite non-negative number, got {lambda}"));
        }
        if !init_scale.is_finite() || init_scale <= 0.0 {
            return invalid_param(format!("init_scale must be positive, got {init_scale}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = Array3::from_shape_simple_fn((c, k, d), || rng.random_range(-init_scale..=init_scale));
        Self::from_initial(PrototypeTensor::new(w0, q, lambda)?, seed)
    }

    /// Starts from given prototypes `W⁰` with zeroed statistics.
    pub fn from_initial(w0: PrototypeTensor, seed: u64) -> Result<Self> {
        let shape = w0.weights.dim();
        Ok(Self {
            a: Array3::zeros(shape),
            b: Array3::zeros(shape),
            wbar: Array3::zeros(shape),
            w: w0,
            t: 0,
            seed,
            norm_warned: false,
            fresh_a: Array3::zeros(shape),
            fresh_b: Array3::zeros(shape),
        })
    }

    pub fn dim(&self) -> usize {
        self.w.dim()
    }

    pub fn classes(&self) -> usize {
        self.w.classes()
    }

    pub fn prototypes(&self) -> usize {
        self.w.prototypes()
    }

    pub fn lambda(&self) -> f64 {
        self.w.lambda
    }

    pub fn q(&self) -> SmoothnessQ {
        self.w.q
    }

    /// One update from a single example. Returns the loss at the pre-update `W`.
    pub fn step(&mut self, x: ArrayView1<f64>, y: usize) -> Result<f64> {
        let row = x.to_owned().into_shape_with_order((1, x.len())).expect("1 × d");
        self.step_minibatch(row.view(), &[y])
    }

    /// One update whose fresh terms are the batch averages of the per-example
    /// terms, all evaluated at the frozen `W^{t−1}`. Returns the batch mean loss.
    pub fn step_minibatch(&mut self, xs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let (n, d) = xs.dim();
        let (c, k, _) = self.w.weights.dim();
        if n == 0 {
            return invalid_input("empty minibatch");
        }
        if labels.len() != n {
            return invalid_input(format!("{} labels for {} examples", labels.len(), n));
        }
        if d != self.dim() {
            return invalid_input(format!("examples have dimension {d}, trainer expects {}", self.dim()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return invalid_input(format!("label {} out of range for {c} classes", y + 1));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return invalid_input("minibatch contains non-finite values");
        }
        if !self.norm_warned && xs.rows().into_iter().any(|r| r.dot(&r) > 1.0 + 1e-9) {
            warn!("training descriptors with norm above 1; the update assumes ||x|| <= 1");
            self.norm_warned = true;
        }

        let xs = xs.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let weights = self.w.weights.as_slice().expect("standard layout");
        let q = self.q();

        // per-example coefficients: A gets σ_r ∇φ(s_r), B gets ∇φ(s_y) for the label row
        let run = |(x, &y): (&[f64], &usize)| {
            let mut fwd = Forward::new(c, k);
            fwd.run(weights, d, x, y, q);
            let mut coef = fwd.grads.clone();
            for r in 0..c {
                for v in &mut coef[r * k..(r + 1) * k] {
                    *v *= fwd.softmax[r];
                }
            }
            let truth = fwd.grads[y * k..(y + 1) * k].to_vec();
            (coef, truth, fwd.loss)
        };
        let per_example: Vec<(Vec<f64>, Vec<f64>, f64)> = if n >= PARALLEL_BATCH {
            xs.par_chunks_exact(d).zip(labels.par_iter()).map(run).collect()
        } else {
            xs.chunks_exact(d).zip(labels.iter()).map(run).collect()
        };
        let inv_n = 1.0 / n as f64;

        let accumulate = |r: usize, fa: &mut [f64], fb: &mut [f64]| {
            fa.iter_mut().for_each(|v| *v = 0.0);
            fb.iter_mut().for_each(|v| *v = 0.0);
            for ((coef, truth, _), (x, &y)) in per_example.iter().zip(xs.chunks_exact(d).zip(labels)) {
                for i in 0..k {
                    let ca = coef[r * k + i];
                    if ca != 0.0 {
                        for (dst, xv) in fa[i * d..(i + 1) * d].iter_mut().zip(x) {
                            *dst += ca * xv;
                        }
                    }
                    if y == r && truth[i] != 0.0 {
                        let cb = truth[i];
                        for (dst, xv) in fb[i * d..(i + 1) * d].iter_mut().zip(x) {
                            *dst += cb * xv;
                        }
                    }
                }
            }
            if n > 1 {
                fa.iter_mut().for_each(|v| *v *= inv_n);
                fb.iter_mut().for_each(|v| *v *= inv_n);
            }
        };
        let fa = self.fresh_a.as_slice_mut().expect("standard layout");
        let fb = self.fresh_b.as_slice_mut().expect("standard layout");
        let block = k * d;
        if n >= PARALLEL_BATCH {
            fa.par_chunks_exact_mut(block)
                .zip(fb.par_chunks_exact_mut(block))
                .enumerate()
                .for_each(|(r, (a, b))| accumulate(r, a, b));
        } else {
            for (r, (a, b)) in fa.chunks_exact_mut(block).zip(fb.chunks_exact_mut(block)).enumerate() {
                accumulate(r, a, b);
            }
        }

        self.t += 1;
        let fresh = 1.0 / (self.t as f64).sqrt();
        let gamma = 1.0 - fresh;
        let shrink = 1.0 / (1.0 + self.lambda());
        let mut finite = true;
        let w = self.w.weights.as_slice_mut().expect("standard layout");
        let a = self.a.as_slice_mut().expect("standard layout");
        let b = self.b.as_slice_mut().expect("standard layout");
        let wbar = self.wbar.as_slice_mut().expect("standard layout");
        let fa = self.fresh_a.as_slice().expect("standard layout");
        let fb = self.fresh_b.as_slice().expect("standard layout");
        for i in 0..w.len() {
            a[i] = gamma * a[i] + fresh * fa[i];
            b[i] = gamma * b[i] + fresh * fb[i];
            wbar[i] = gamma * wbar[i] + fresh * w[i];
            w[i] = shrink * (wbar[i] - a[i] + b[i]);
            finite &= w[i].is_finite();
        }
        if !finite {
            return Err(Error::Numerical(format!("non-finite prototypes after update {}", self.t)));
        }
        Ok(per_example.iter().map(|e| e.2).sum::<f64>() * inv_n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// When false examples are consumed in source order and no index is kept.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 2500,
            shuffle_seed: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub updates: u64,
    /// Mean pre-update softmax loss over each epoch's examples.
    pub epoch_losses: Vec<f64>,
    /// Mean wall-clock seconds spent inside each update.
    pub seconds_per_update: f64,
    pub final_weights: PrototypeTensor,
}

/// Runs `config.epochs` passes over `source`, one update per minibatch.
pub fn train<S: ExampleSource + ?Sized>(
    source: &S,
    config: &TrainConfig,
    state: &mut TrainerState,
) -> Result<TrainReport> {
    if config.epochs == 0 {
        return invalid_param("epochs must be at least 1");
    }
    if config.batch_size == 0 {
        return invalid_param("batch size must be at least 1");
    }
    if source.dim() != state.dim() {
        return invalid_input(format!(
            "examples have dimension {}, trainer expects {}",
            source.dim(),
            state.dim()
        ));
    }
    let n = source.len();
    if n == 0 {
        return invalid_input("no training examples");
    }
    let d = state.dim();
    let batch = config.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = if config.shuffle { (0..n).collect() } else { Vec::new() };
    let mut xs = Array2::<f64>::zeros((batch, d));
    let mut labels = vec![0usize; batch];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut updates = 0u64;
    let mut busy = 0.0f64;

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            for j in 0..len {
                let idx = if config.shuffle { order[start + j] } else { start + j };
                let mut row = xs.row_mut(j);
                labels[j] = source.fetch(idx, row.as_slice_mut().expect("contiguous row"))?;
            }
            let t0 = Instant::now();
            let loss = state.step_minibatch(xs.slice(ndarray::s![..len, ..]), &labels[..len])?;
            busy += t0.elapsed().as_secs_f64();
            loss_sum += loss * len as f64;
            updates += 1;
            start += len;
        }
        let avg = loss_sum / n as f64;
        let elapsed = started.elapsed().as_secs_f64();
        let per_epoch_updates = n.div_ceil(batch);
        info!(
            "epoch={epoch} avg_loss={avg:.6} updates={updates} ups={:.1}",
            per_epoch_updates as f64 / elapsed.max(1e-12)
        );
        epoch_losses.push(avg);
    }

    Ok(TrainReport {
        updates,
        epoch_losses,
        seconds_per_update: busy / updates.max(1) as f64,
        final_weights: state.w.clone(),
    })
}

/// `g(W) = ℓ(W; x, y) + λ Σ_l ‖W_l‖_F²`.
pub fn regularized_loss(
    w: &PrototypeTensor,
    x: ArrayView1<f64>,
    y: usize,
    q: SmoothnessQ,
    lambda: f64,
) -> Result<f64> {
    Ok(softmax_loss(w, x, y, q)? + lambda * w.weights.iter().map(|v| v * v).sum::<f64>())
}

/// First-order surrogate of [`regularized_loss`] anchored at `v`:
/// `h(W) = g₁(V) + ⟨∇g₁(V), W − V⟩ + (L/2)‖W − V‖² + λ Σ ‖W_l‖_F²`.
///
/// `λ` and `q` come from the trainer state.
pub fn surrogate_value(
    state: &TrainerState,
    v: &PrototypeTensor,
    w: &PrototypeTensor,
    x: ArrayView1<f64>,
    y: usize,
    lipschitz: f64,
) -> Result<f64> {
    if v.weights.dim() != w.weights.dim() || v.weights.dim() != state.w.weights.dim() {
        return invalid_input(format!(
            "surrogate shapes differ: anchor {:?}, point {:?}, trainer {:?}",
            v.weights.dim(),
            w.weights.dim(),
            state.w.weights.dim()
        ));
    }
    if lipschitz.is_nan() || lipschitz <= 0.0 {
        return invalid_param(format!("L must be positive, got {lipschitz}"));
    }
    let q = state.q();
    let anchor_loss = softmax_loss(v, x, y, q)?;
    let grad = loss_gradient(v, x, y, q)?;
    let mut linear = 0.0;
    let mut prox = 0.0;
    for ((g, wv), vv) in grad.iter().zip(w.weights.iter()).zip(v.weights.iter()) {
        let diff = wv - vv;
        linear += g * diff;
        prox += diff * diff;
    }
    let reg = state.lambda() * w.weights.iter().map(|x| x * x).sum::<f64>();
    Ok(anchor_loss + linear + 0.5 * lipschitz * prox + reg)
}
