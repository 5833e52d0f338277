//! The ML3 score `φ_q(z) = ‖[z]₊‖_q`, its gradient, per-class scores, and the
//! multiclass softmax loss over those scores.
//!
//! Prototype tensors are stored class-major: `weights[[class, prototype, dim]]`,
//! so the `k × d` block of a class holds one prototype per row.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array3, ArrayView1, ArrayView2};

use crate::error::{invalid_input, invalid_param, Error, Result};

/// Above this exponent the score is evaluated as the max-norm.
pub const LARGE_Q: f64 = 1e6;

/// Boundary smoothness `q ∈ [1, ∞]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessQ(f64);

impl SmoothnessQ {
    pub const INFINITY: SmoothnessQ = SmoothnessQ(f64::INFINITY);

    pub fn new(q: f64) -> Result<Self> {
        if q.is_nan() || q < 1.0 {
            return invalid_param(format!("q must be >= 1, got {q}"));
        }
        Ok(Self(q))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// True for `q = ∞` and for finite `q` large enough to take the max branch.
    pub fn is_max(self) -> bool {
        self.0 > LARGE_Q
    }
}

impl Default for SmoothnessQ {
    fn default() -> Self {
        SmoothnessQ(2.0)
    }
}

impl fmt::Display for SmoothnessQ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for SmoothnessQ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Ok(Self::INFINITY),
            other => {
                let q: f64 = other
                    .parse()
                    .map_err(|_| Error::InvalidParameter(format!("cannot parse q from '{s}'")))?;
                Self::new(q)
            }
        }
    }
}

/// `φ_q(z) = ‖[z]₊‖_q`; for `q = ∞` this is `max{0, max z}`.
pub fn phi(z: &[f64], q: SmoothnessQ) -> f64 {
    let q = q.value();
    if q > LARGE_Q {
        return z.iter().fold(0.0, |m, &v| if v > m { v } else { m });
    }
    if q == 1.0 {
        return z.iter().filter(|&&v| v > 0.0).sum();
    }
    if q == 2.0 {
        return z.iter().filter(|&&v| v > 0.0).map(|v| v * v).sum::<f64>().sqrt();
    }
    let m = z.iter().fold(0.0, |m, &v| if v > m { v } else { m });
    if m == 0.0 {
        return 0.0;
    }
    let sum: f64 = z.iter().filter(|&&v| v > 0.0).map(|v| (v / m).powf(q)).sum();
    m * sum.powf(1.0 / q)
}

/// Writes `∇φ_q(z)` into `out` given the precomputed `phi_z = φ_q(z)`.
///
/// Subgradient choices: zero where `φ = 0`, lowest-index one-hot for ties at `q = ∞`.
pub fn grad_phi_into(z: &[f64], phi_z: f64, q: SmoothnessQ, out: &mut [f64]) {
    out.iter_mut().for_each(|g| *g = 0.0);
    if phi_z <= 0.0 {
        return;
    }
    let q = q.value();
    if q > LARGE_Q {
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        out[best] = 1.0;
        return;
    }
    for (g, &v) in out.iter_mut().zip(z) {
        if v > 0.0 {
            *g = if q == 1.0 {
                1.0
            } else if q == 2.0 {
                v / phi_z
            } else {
                (v / phi_z).powf(q - 1.0)
            };
        }
    }
}

pub fn grad_phi(z: &[f64], q: SmoothnessQ) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    grad_phi_into(z, phi(z, q), q, &mut out);
    out
}

/// Learned prototypes `W ∈ R^{d×k×c}` with the hyper-parameters used to train them.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTensor {
    /// Shape `(c, k, d)`.
    pub weights: Array3<f64>,
    pub q: SmoothnessQ,
    pub lambda: f64,
}

impl PrototypeTensor {
    pub fn new(weights: Array3<f64>, q: SmoothnessQ, lambda: f64) -> Result<Self> {
        let (c, k, d) = weights.dim();
        if c == 0 || k == 0 || d == 0 {
            return invalid_param(format!("prototype tensor shape (c={c}, k={k}, d={d}) has a zero axis"));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("prototype tensor has non-finite entries".into()));
        }
        let weights = weights.as_standard_layout().into_owned();
        Ok(Self { weights, q, lambda })
    }

    pub fn zeros(d: usize, k: usize, c: usize, q: SmoothnessQ, lambda: f64) -> Result<Self> {
        Self::new(Array3::zeros((c, k, d)), q, lambda)
    }

    pub fn dim(&self) -> usize {
        self.weights.dim().2
    }

    pub fn prototypes(&self) -> usize {
        self.weights.dim().1
    }

    pub fn classes(&self) -> usize {
        self.weights.dim().0
    }

    /// The `k × d` prototype block of one class.
    pub fn class_block(&self, class: usize) -> ArrayView2<'_, f64> {
        self.weights.index_axis(ndarray::Axis(0), class)
    }
}

pub type LossGradient = Array3<f64>;

/// Scores, softmax weights and score gradients of one example at fixed `W`.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pub k: usize,
    /// `c × k` inner products `W_rᵀ x`.
    pub raw: Vec<f64>,
    /// `φ(W_rᵀ x)` per class.
    pub scores: Vec<f64>,
    pub softmax: Vec<f64>,
    /// `c × k`, `∇φ(W_rᵀ x)` per class.
    pub grads: Vec<f64>,
    pub loss: f64,
}

impl Forward {
    pub fn new(c: usize, k: usize) -> Self {
        Self {
            k,
            raw: vec![0.0; c * k],
            scores: vec![0.0; c],
            softmax: vec![0.0; c],
            grads: vec![0.0; c * k],
            loss: 0.0,
        }
    }

    /// Computes everything at `weights` (standard layout, shape `(c, k, d)`).
    pub fn run(&mut self, weights: &[f64], d: usize, x: &[f64], y: usize, q: SmoothnessQ) {
        let k = self.k;
        for (raw, w) in self.raw.iter_mut().zip(weights.chunks_exact(d)) {
            *raw = w.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        for (r, score) in self.scores.iter_mut().enumerate() {
            *score = phi(&self.raw[r * k..(r + 1) * k], q);
        }
        self.loss = softmax_into(&self.scores, y, &mut self.softmax);
        for r in 0..self.scores.len() {
            let span = r * k..(r + 1) * k;
            grad_phi_into(&self.raw[span.clone()], self.scores[r], q, &mut self.grads[span]);
        }
    }
}

/// Stable softmax of `scores` into `out`; returns the softmax loss at label `y`.
pub(crate) fn softmax_into(scores: &[f64], y: usize, out: &mut [f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    (total.ln() - (scores[y] - max)).max(0.0)
}

fn check_shapes(w: &PrototypeTensor, x: ArrayView1<f64>, y: Option<usize>) -> Result<()> {
    if x.len() != w.dim() {
        return invalid_input(format!(
            "descriptor has dimension {}, prototypes have {}",
            x.len(),
            w.dim()
        ));
    }
    if let Some(y) = y {
        if y >= w.classes() {
            return invalid_input(format!(
                "label {} out of range for {} classes",
                y + 1,
                w.classes()
            ));
        }
    }
    Ok(())
}

fn forward(w: &PrototypeTensor, x: ArrayView1<f64>, y: usize, q: SmoothnessQ) -> Forward {
    let x = x.to_vec();
    let mut fwd = Forward::new(w.classes(), w.prototypes());
    fwd.run(w.weights.as_slice().expect("standard layout"), w.dim(), &x, y, q);
    fwd
}

/// `[φ(W_1ᵀx), …, φ(W_cᵀx)]`.
pub fn class_scores(w: &PrototypeTensor, x: ArrayView1<f64>, q: SmoothnessQ) -> Result<Array1<f64>> {
    check_shapes(w, x, None)?;
    Ok(Array1::from(forward(w, x, 0, q).scores))
}

/// `log(1 + Σ_{r≠y} exp(f_r − f_y))`, evaluated with max-subtraction.
pub fn softmax_loss(w: &PrototypeTensor, x: ArrayView1<f64>, y: usize, q: SmoothnessQ) -> Result<f64> {
    check_shapes(w, x, Some(y))?;
    Ok(forward(w, x, y, q).loss)
}

/// Exact gradient of [`softmax_loss`] with respect to the prototypes:
/// `G_r = (σ_r − 1{r=y}) · ∇φ(W_rᵀx) xᵀ`.
pub fn loss_gradient(
    w: &PrototypeTensor,
    x: ArrayView1<f64>,
    y: usize,
    q: SmoothnessQ,
) -> Result<LossGradient> {
    check_shapes(w, x, Some(y))?;
    let fwd = forward(w, x, y, q);
    let (c, k, d) = w.weights.dim();
    let mut grad = Array3::zeros((c, k, d));
    for r in 0..c {
        let weight = fwd.softmax[r] - if r == y { 1.0 } else { 0.0 };
        for i in 0..k {
            let coef = weight * fwd.grads[r * k + i];
            if coef != 0.0 {
                for j in 0..d {
                    grad[[r, i, j]] = coef * x[j];
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(v: f64) -> SmoothnessQ {
        SmoothnessQ::new(v).unwrap()
    }

    #[test]
    fn q_validation_and_parsing() {
        assert!(matches!(SmoothnessQ::new(0.5), Err(Error::InvalidParameter(_))));
        assert!(SmoothnessQ::new(f64::NAN).is_err());
        assert_eq!("inf".parse::<SmoothnessQ>().unwrap(), SmoothnessQ::INFINITY);
        assert_eq!("2".parse::<SmoothnessQ>().unwrap(), q(2.0));
        assert!("0.9".parse::<SmoothnessQ>().is_err());
        assert!(q(2e6).is_max());
        assert_eq!(SmoothnessQ::INFINITY.to_string(), "inf");
    }

    #[test]
    fn phi_examples() {
        for qq in [1.0, 1.5, 2.0, 3.0, f64::INFINITY] {
            assert_eq!(phi(&[-1.0, -2.0], SmoothnessQ(qq)), 0.0);
        }
        assert_eq!(phi(&[3.0, 4.0], q(2.0)), 5.0);
        assert_eq!(phi(&[1.0, 5.0, 2.0], SmoothnessQ::INFINITY), 5.0);
        assert_eq!(phi(&[1.0, -5.0, 2.0], q(1.0)), 3.0);
        assert!((phi(&[3.0, 4.0], q(3.0)) - 91f64.powf(1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn huge_finite_q_takes_max_branch() {
        assert_eq!(phi(&[1.0, 5.0, 2.0], q(1e9)), 5.0);
        assert_eq!(grad_phi(&[1.0, 5.0, 2.0], q(1e9)), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn grad_phi_examples() {
        let g = grad_phi(&[3.0, 4.0], q(2.0));
        assert_eq!(g, vec![0.6, 0.8]);
        assert_eq!(grad_phi(&[-1.0, -2.0], q(2.0)), vec![0.0, 0.0]);
        assert_eq!(grad_phi(&[5.0, 5.0], SmoothnessQ::INFINITY), vec![1.0, 0.0]);
        assert_eq!(grad_phi(&[0.5, -1.0, 2.0], q(1.0)), vec![1.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn phi_homogeneity_and_monotonicity(
            z in proptest::collection::vec(-3.0f64..3.0, 1..6),
            alpha in 0.0f64..10.0,
        ) {
            let qs = [1.0, 1.5, 2.0, 3.0, 7.0];
            for &qq in &qs {
                let base = phi(&z, q(qq));
                prop_assert!(base >= 0.0);
                prop_assert_eq!(base == 0.0, z.iter().all(|&v| v <= 0.0));
                let scaled: Vec<f64> = z.iter().map(|v| v * alpha).collect();
                prop_assert!((phi(&scaled, q(qq)) - alpha * base).abs() <= 1e-10 * (1.0 + alpha * base));
            }
            for w in qs.windows(2) {
                prop_assert!(phi(&z, q(w[1])) <= phi(&z, q(w[0])) + 1e-12);
            }
            let inf = phi(&z, SmoothnessQ::INFINITY);
            for &qq in &qs {
                prop_assert!(inf <= phi(&z, q(qq)) + 1e-12);
            }
        }

        #[test]
        fn euler_identity(z in proptest::collection::vec(0.01f64..3.0, 1..6)) {
            for qq in [1.0, 1.5, 2.0, 3.0] {
                let g = grad_phi(&z, q(qq));
                let inner: f64 = g.iter().zip(&z).map(|(a, b)| a * b).sum();
                prop_assert!((inner - phi(&z, q(qq))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn class_scores_examples() {
        let zero = PrototypeTensor::zeros(3, 2, 4, q(2.0), 0.0).unwrap();
        assert_eq!(class_scores(&zero, array![1.0, 2.0, 3.0].view(), q(2.0)).unwrap(), Array1::<f64>::zeros(4));

        let mut w = Array3::zeros((2, 2, 2));
        w[[0, 0, 0]] = 1.0;
        w[[0, 1, 1]] = 1.0;
        w[[1, 0, 0]] = -1.0;
        w[[1, 1, 1]] = -1.0;
        let w = PrototypeTensor::new(w, q(2.0), 0.0).unwrap();
        assert_eq!(class_scores(&w, array![3.0, 4.0].view(), q(2.0)).unwrap(), array![5.0, 0.0]);
        assert!(class_scores(&w, array![3.0].view(), q(2.0)).is_err());
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, k: usize, d: usize) -> PrototypeTensor {
        let w = Array3::from_shape_fn((c, k, d), |_| rng.random_range(-1.0..1.0));
        PrototypeTensor::new(w, q(2.0), 0.0).unwrap()
    }

    #[test]
    fn class_scores_compose_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_tensor(&mut rng, 4, 3, 5);
        let x = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        for qq in [q(1.5), q(2.0), SmoothnessQ::INFINITY] {
            let got = class_scores(&w, x.view(), qq).unwrap();
            for r in 0..4 {
                let z: Vec<f64> = (0..3).map(|i| w.class_block(r).row(i).dot(&x)).collect();
                assert!((got[r] - phi(&z, qq)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_loss_examples() {
        let zero = PrototypeTensor::zeros(2, 3, 5, q(2.0), 0.0).unwrap();
        let loss = softmax_loss(&zero, array![0.3, 0.1].view(), 2, q(2.0)).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);

        // class 0 scores 50 more than every other class
        let mut w = Array3::zeros((3, 1, 1));
        w[[0, 0, 0]] = 50.0;
        let w = PrototypeTensor::new(w, q(2.0), 0.0).unwrap();
        let loss = softmax_loss(&w, array![1.0].view(), 0, q(2.0)).unwrap();
        assert!((0.0..=1e-20).contains(&loss));

        assert!(matches!(
            softmax_loss(&w, array![1.0].view(), 3, q(2.0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn softmax_loss_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let w = random_tensor(&mut rng, 5, 3, 4);
            let x = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
            let y = rng.random_range(0..5);
            let f = class_scores(&w, x.view(), q(2.0)).unwrap();
            let tail: f64 = (0..5).filter(|&r| r != y).map(|r| (f[r] - f[y]).exp()).sum();
            let naive = tail.ln_1p();
            let got = softmax_loss(&w, x.view(), y, q(2.0)).unwrap();
            assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1e-300), "{got} vs {naive}");
        }
    }

    #[test]
    fn loss_gradient_zero_weights() {
        let zero = PrototypeTensor::zeros(3, 2, 4, q(2.0), 0.0).unwrap();
        let g = loss_gradient(&zero, array![0.2, 0.1, 0.3].view(), 1, q(2.0)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    fn finite_difference(w: &PrototypeTensor, x: ArrayView1<f64>, y: usize, qq: SmoothnessQ, h: f64) -> Array3<f64> {
        let mut out = Array3::zeros(w.weights.dim());
        for idx in ndarray::indices(w.weights.dim()) {
            let mut plus = w.clone();
            plus.weights[idx] += h;
            let mut minus = w.clone();
            minus.weights[idx] -= h;
            out[idx] = (softmax_loss(&plus, x, y, qq).unwrap() - softmax_loss(&minus, x, y, qq).unwrap()) / (2.0 * h);
        }
        out
    }

    #[test]
    fn loss_gradient_single_prototype_matches_fd() {
        let w = PrototypeTensor::new(array![[[1.0]], [[-1.0]]], q(2.0), 0.0).unwrap();
        let x = array![1.0];
        let g = loss_gradient(&w, x.view(), 0, q(2.0)).unwrap();
        let fd = finite_difference(&w, x.view(), 0, q(2.0), 1e-6);
        let sigma0 = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((g[[0, 0, 0]] - (sigma0 - 1.0)).abs() < 1e-15);
        for (a, b) in g.iter().zip(fd.iter()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-8), "{a} vs {b}");
        }
    }

    #[test]
    fn loss_gradient_random_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 30 {
            let w = random_tensor(&mut rng, 3, 3, 4);
            let x = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
            let raw: Vec<f64> = w.weights.as_slice().unwrap().chunks(4).map(|p| p.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
            // stay away from kinks so central differences are meaningful
            if raw.iter().any(|v| v.abs() < 1e-3) || class_scores(&w, x.view(), q(2.0)).unwrap().iter().any(|&s| s == 0.0) {
                continue;
            }
            let y = rng.random_range(0..3);
            for qq in [q(1.5), q(2.0), q(3.0)] {
                let g = loss_gradient(&w, x.view(), y, qq).unwrap();
                let fd = finite_difference(&w, x.view(), y, qq, 1e-6);
                for (a, b) in g.iter().zip(fd.iter()) {
                    let scale = a.abs().max(b.abs());
                    assert!(scale < 1e-9 || (a - b).abs() / scale <= 1e-4, "{a} vs {b}");
                }
            }
            checked += 1;
        }
    }
}
