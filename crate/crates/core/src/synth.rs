//! Seeded synthetic data for benchmarks and end-to-end tests.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{cap_norm, ExampleSource};
use crate::error::{invalid_input, invalid_param, Result};
use crate::i2c::argmax;
use crate::ml3::{class_scores, PrototypeTensor, SmoothnessQ};
use crate::stoml3::{train, TrainConfig, TrainerState, DEFAULT_INIT_SCALE};
use crate::patchgrid::Image;

/// Distance of each XOR blob center from either axis.
pub const XOR_OFFSET: f64 = 1.0;

/// Four Gaussian blobs centered at `(±XOR_OFFSET, ±XOR_OFFSET)`. Class 0 holds
/// the first and third quadrants, class 1 the second and fourth. Blobs are
/// drawn round-robin so every prefix is balanced, and points are capped to the
/// unit ball.
pub fn xor_blobs(n: usize, sigma: f64, seed: u64) -> Result<(Array2<f64>, Vec<usize>)> {
    let noise = Normal::new(0.0, sigma).map_err(|e| crate::Error::InvalidParameter(format!("sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [
        ([XOR_OFFSET, XOR_OFFSET], 0),
        ([-XOR_OFFSET, XOR_OFFSET], 1),
        ([-XOR_OFFSET, -XOR_OFFSET], 0),
        ([XOR_OFFSET, -XOR_OFFSET], 1),
    ];
    let mut points = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (c, y) = centers[i % 4];
        let p = Array1::from(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
        points.row_mut(i).assign(&cap_norm(p.view())?);
        labels.push(y);
    }
    Ok((points, labels))
}

/// Settings of the XOR benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct XorBenchmark {
    pub points: usize,
    pub sigma: f64,
    pub k: usize,
    pub q: SmoothnessQ,
    pub lambda: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for XorBenchmark {
    fn default() -> Self {
        Self {
            points: 2000,
            sigma: 0.2,
            k: 4,
            q: SmoothnessQ::new(2.0).expect("valid"),
            lambda: 1e-3,
            batch: 50,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct XorOutcome {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub weights: PrototypeTensor,
}

/// Fraction of points whose argmax class score (at the training smoothness)
/// equals the label.
pub fn point_accuracy(w: &PrototypeTensor, points: &Array2<f64>, labels: &[usize], q: SmoothnessQ) -> Result<f64> {
    let mut hits = 0usize;
    for (x, &y) in points.rows().into_iter().zip(labels) {
        let scores = class_scores(w, x, q)?;
        if argmax(scores.as_slice().expect("contiguous")) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Trains on one seeded XOR draw and scores it and an independent draw of the
/// same size.
pub fn run_xor_benchmark(cfg: &XorBenchmark) -> Result<XorOutcome> {
    let (train_x, train_y) = xor_blobs(cfg.points, cfg.sigma, cfg.seed)?;
    let (test_x, test_y) = xor_blobs(cfg.points, cfg.sigma, cfg.seed.wrapping_add(0x9e37_79b9))?;
    let mut state = TrainerState::new(2, cfg.k, 2, cfg.lambda, cfg.q, DEFAULT_INIT_SCALE, cfg.seed)?;
    let source = PointSource { points: &train_x, labels: &train_y };
    let config = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        shuffle_seed: cfg.seed,
        shuffle: true,
    };
    let report = train(&source, &config, &mut state)?;
    let w = report.final_weights;
    Ok(XorOutcome {
        train_accuracy: point_accuracy(&w, &train_x, &train_y, cfg.q)?,
        heldout_accuracy: point_accuracy(&w, &test_x, &test_y, cfg.q)?,
        weights: w,
    })
}

/// An in-memory labeled point set as an example source.
pub struct PointSource<'a> {
    pub points: &'a Array2<f64>,
    pub labels: &'a [usize],
}

impl ExampleSource for PointSource<'_> {
    fn dim(&self) -> usize {
        self.points.ncols()
    }

    fn len(&self) -> usize {
        self.points.nrows()
    }

    fn fetch(&self, index: usize, out: &mut [f64]) -> Result<usize> {
        for (o, v) in out.iter_mut().zip(self.points.row(index)) {
            *o = *v;
        }
        Ok(self.labels[index])
    }
}

/// A virtual stream of `len` labeled examples, each generated on demand from
/// its index: no example is ever stored. Class `y` examples are a fixed random
/// mean plus isotropic noise, capped to the unit ball.
pub struct SyntheticStream {
    dim: usize,
    classes: usize,
    len: usize,
    seed: u64,
    means: Array2<f64>,
    noise: f64,
}

impl SyntheticStream {
    pub fn new(dim: usize, classes: usize, len: usize, seed: u64) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return invalid_param("synthetic stream needs positive dimension and class count");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.5 / (dim as f64).sqrt();
        let means = Array2::from_shape_simple_fn((classes, dim), || scale * rng.sample::<f64, _>(StandardNormal));
        Ok(Self {
            dim,
            classes,
            len,
            seed,
            means,
            noise: 0.5 / (dim as f64).sqrt(),
        })
    }
}

impl ExampleSource for SyntheticStream {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.len
    }

    fn fetch(&self, index: usize, out: &mut [f64]) -> Result<usize> {
        if index >= self.len {
            return invalid_input(format!("example {index} out of range"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let y = rng.random_range(0..self.classes);
        let mut sq = 0.0;
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.means[[y, j]] + self.noise * rng.sample::<f64, _>(StandardNormal);
            sq += *o * *o;
        }
        let norm = sq.sqrt();
        if norm > 1.0 {
            let capped = cap_norm(ndarray::ArrayView1::from(&*out))?;
            out.copy_from_slice(capped.as_slice().expect("contiguous"));
        }
        Ok(y)
    }
}

/// A grayscale texture: class 0 varies along rows (horizontal stripes), class
/// 1 along columns (vertical stripes). Period, phase and noise are seeded.
pub fn texture_image(class: usize, width: usize, height: usize, seed: u64) -> Result<Image> {
    if class > 1 {
        return invalid_param(format!("texture class must be 0 or 1, got {class}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = rng.random_range(40.0..64.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise: Vec<f64> = (0..width * height).map(|_| rng.random_range(-0.05..0.05)).collect();
    Image::gray_from_fn(width, height, |x, y| {
        let t = if class == 0 { y } else { x } as f64;
        let v = 0.5 + 0.4 * (std::f64::consts::TAU * t / period + phase).sin();
        (v + noise[y * width + x]).clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::l2_norm;

    #[test]
    fn xor_is_balanced_and_deterministic() {
        let (p, y) = xor_blobs(400, 0.2, 5).unwrap();
        assert_eq!(y.iter().filter(|&&v| v == 0).count(), 200);
        assert_eq!(xor_blobs(400, 0.2, 5).unwrap().0, p);
        for (row, &label) in p.rows().into_iter().zip(&y) {
            assert!(l2_norm(row) <= 1.0);
            let _ = label;
        }
        // most points sit in their blob's quadrant
        let agree = p
            .rows()
            .into_iter()
            .zip(&y)
            .filter(|(r, &l)| ((r[0] * r[1] > 0.0) as usize) == 1 - l)
            .count();
        assert!(agree > 380, "{agree}");
    }

    #[test]
    fn stream_is_random_access() {
        let s = SyntheticStream::new(8, 3, 100, 9).unwrap();
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        let ya = s.fetch(42, &mut a).unwrap();
        s.fetch(7, &mut b).unwrap();
        let yb = s.fetch(42, &mut b).unwrap();
        assert_eq!((ya, &a), (yb, &b));
        assert!(l2_norm(ndarray::ArrayView1::from(&a)) <= 1.0);
        assert!(s.fetch(100, &mut a).is_err());
    }

    #[test]
    fn textures_differ_by_orientation() {
        let h = texture_image(0, 64, 64, 1).unwrap();
        let v = texture_image(1, 64, 64, 1).unwrap();
        // horizontal stripes are constant along a row up to noise
        let row_spread = (0..64).map(|x| h.get(x, 10, 0)).fold(0.0f64, |m, p| m.max((p - h.get(0, 10, 0)).abs()));
        let col_spread = (0..64).map(|y| v.get(10, y, 0)).fold(0.0f64, |m, p| m.max((p - v.get(10, 0, 0)).abs()));
        assert!(row_spread <= 0.1 + 1e-12 && col_spread <= 0.1 + 1e-12);
        assert!(texture_image(2, 8, 8, 0).is_err());
    }
}
