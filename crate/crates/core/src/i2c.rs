//! Image-to-class classifiers.
//!
//! NBNN keeps every training descriptor of class `y` as its support and labels
//! a bag by the smallest summed squared nearest-neighbour distance. NBNL replaces
//! the supports by `k` learned prototypes per class and labels a bag by the
//! largest mean per-patch ML3 score.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::{l2_norm, nearest_neighbor, squared_distance, Dataset, FeatureBag};
use crate::error::{invalid_input, Result};
use crate::kdtree::KdTree;
use crate::ml3::{phi, PrototypeTensor, SmoothnessQ};

/// Tolerance used by [`check_nbnl_bound`] on both its preconditions and its verdict.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
enum Support {
    Scan(Array2<f64>),
    Tree(KdTree),
}

impl Support {
    fn rows(&self) -> ArrayView2<'_, f64> {
        match self {
            Support::Scan(m) => m.view(),
            Support::Tree(t) => t.points().view(),
        }
    }

    fn nearest(&self, x: ArrayView1<f64>) -> Result<(usize, f64)> {
        match self {
            Support::Scan(m) => nearest_neighbor(x, m.view()),
            Support::Tree(t) => t.nearest(x),
        }
    }
}

/// Per-class support sets.
#[derive(Debug, Clone)]
pub struct NbnnModel {
    supports: Vec<Support>,
    dim: usize,
}

impl NbnnModel {
    /// Builds a model directly from per-class support matrices.
    pub fn from_supports(supports: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = supports.first() else {
            return invalid_input("NBNN model needs at least one class");
        };
        let dim = first.ncols();
        for (y, s) in supports.iter().enumerate() {
            if s.nrows() == 0 {
                return invalid_input(format!("class {} has no support descriptors", y + 1));
            }
            if s.ncols() != dim {
                return invalid_input(format!(
                    "class {} support has dimension {}, expected {dim}",
                    y + 1,
                    s.ncols()
                ));
            }
        }
        Ok(Self {
            supports: supports.into_iter().map(Support::Scan).collect(),
            dim,
        })
    }

    /// Replaces the exhaustive scan with an exact k-d tree per class.
    pub fn with_kdtree(self) -> Result<Self> {
        let supports = self
            .supports
            .into_iter()
            .map(|s| match s {
                Support::Scan(m) => KdTree::build(m).map(Support::Tree),
                tree => Ok(tree),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { supports, dim: self.dim })
    }

    pub fn uses_kdtree(&self) -> bool {
        matches!(self.supports.first(), Some(Support::Tree(_)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.supports.len()
    }

    pub fn support(&self, class: usize) -> ArrayView2<'_, f64> {
        self.supports[class].rows()
    }
}

/// Concatenates the patches of all bags labeled `y` into class `y`'s support,
/// in dataset order.
pub fn build_support(train: &Dataset) -> Result<NbnnModel> {
    let c = train.class_count();
    let mut per_class: Vec<Vec<ArrayView2<f64>>> = vec![Vec::new(); c];
    for bag in train.bags() {
        match bag.label {
            Some(y) => per_class[y].push(bag.patches.view()),
            None => return invalid_input(format!("training bag '{}' is unlabeled", bag.image_id)),
        }
    }
    let mut supports = Vec::with_capacity(c);
    for (y, blocks) in per_class.iter().enumerate() {
        if blocks.is_empty() {
            return invalid_input(format!("class {} has no training bags", y + 1));
        }
        supports.push(ndarray::concatenate(Axis(0), blocks).expect("equal widths"));
    }
    NbnnModel::from_supports(supports)
}

fn check_class(y: usize, classes: usize) -> Result<()> {
    if y >= classes {
        return invalid_input(format!("class {} out of range for {classes} classes", y + 1));
    }
    Ok(())
}

/// `Σ_{x∈bag} ‖x − π_{W_y}(x)‖²`.
pub fn i2c_distance(model: &NbnnModel, bag: &FeatureBag, y: usize) -> Result<f64> {
    check_class(y, model.classes())?;
    if bag.dim() != model.dim() {
        return invalid_input(format!(
            "bag '{}' has dimension {}, model expects {}",
            bag.image_id,
            bag.dim(),
            model.dim()
        ));
    }
    let support = &model.supports[y];
    let mut total = 0.0;
    for x in bag.patches.rows() {
        total += support.nearest(x)?.1;
    }
    Ok(total)
}

/// Index of the minimum, lowest index on ties.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Image-to-class distance to every class.
pub fn i2c_distances(model: &NbnnModel, bag: &FeatureBag) -> Result<Vec<f64>> {
    (0..model.classes()).map(|y| i2c_distance(model, bag, y)).collect()
}

pub fn nbnn_predict(model: &NbnnModel, bag: &FeatureBag) -> Result<usize> {
    Ok(argmin(&i2c_distances(model, bag)?))
}

/// Entry `y` is `(1/n) Σ_{x∈bag} φ_q(W_yᵀ x)`; with `q = ∞` this is the mean
/// of the (non-negatively truncated) per-patch maxima.
pub fn nbnl_scores(w: &PrototypeTensor, bag: &FeatureBag, q: SmoothnessQ) -> Result<Array1<f64>> {
    if bag.dim() != w.dim() {
        return invalid_input(format!(
            "bag '{}' has dimension {}, prototypes have {}",
            bag.image_id,
            bag.dim(),
            w.dim()
        ));
    }
    let (c, k, _) = w.weights.dim();
    let mut scores = Array1::zeros(c);
    let mut raw = vec![0.0; k];
    for x in bag.patches.rows() {
        for y in 0..c {
            let block = w.class_block(y);
            for (r, proto) in raw.iter_mut().zip(block.rows()) {
                *r = proto.dot(&x);
            }
            scores[y] += phi(&raw, q);
        }
    }
    scores /= bag.len() as f64;
    Ok(scores)
}

pub fn nbnl_predict(w: &PrototypeTensor, bag: &FeatureBag, q: SmoothnessQ) -> Result<usize> {
    let scores = nbnl_scores(w, bag, q)?;
    Ok(argmax(scores.as_slice().expect("contiguous")))
}

/// Both sides of `Σ_x min_i ‖x − w_{y,i}‖² ≤ n(1 + τ) − 2 Σ_x max_i w_{y,i}ᵀx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl BoundCheck {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Evaluates the NBNN-to-NBNL bound for class `y`, with the untruncated max.
///
/// Requires `‖w‖² ≤ τ` for every prototype of class `y` and `‖x‖ ≤ 1` for
/// every patch (each up to [`BOUND_TOLERANCE`]).
pub fn check_nbnl_bound(w: &PrototypeTensor, bag: &FeatureBag, y: usize, tau: f64) -> Result<BoundCheck> {
    check_class(y, w.classes())?;
    if bag.dim() != w.dim() {
        return invalid_input(format!(
            "bag '{}' has dimension {}, prototypes have {}",
            bag.image_id,
            bag.dim(),
            w.dim()
        ));
    }
    let block = w.class_block(y);
    for (i, proto) in block.rows().into_iter().enumerate() {
        let sq = proto.dot(&proto);
        if sq > tau + BOUND_TOLERANCE {
            return invalid_input(format!(
                "prototype column {i} of class {} has squared norm {sq} > tau = {tau}",
                y + 1
            ));
        }
    }
    for (i, x) in bag.patches.rows().into_iter().enumerate() {
        let norm = l2_norm(x);
        if norm > 1.0 + BOUND_TOLERANCE {
            return invalid_input(format!(
                "patch {i} of bag '{}' has norm {norm} > 1",
                bag.image_id
            ));
        }
    }
    let mut lhs = 0.0;
    let mut max_sum = 0.0;
    for x in bag.patches.rows() {
        lhs += block
            .rows()
            .into_iter()
            .map(|p| squared_distance(x, p))
            .fold(f64::INFINITY, f64::min);
        max_sum += block
            .rows()
            .into_iter()
            .map(|p| p.dot(&x))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let rhs = bag.len() as f64 * (1.0 + tau) - 2.0 * max_sum;
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + BOUND_TOLERANCE,
    })
}
