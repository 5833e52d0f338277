//! Exact k-d tree over the rows of a matrix.
//!
//! Queries return exactly what [`crate::data::nearest_neighbor`] returns,
//! including the lowest-index tie-break: distances are computed with the same
//! summation order and a subtree is pruned only when its bound is strictly
//! worse than the current best.

use ndarray::{Array2, ArrayView1};

use crate::data::squared_distance;
use crate::error::{invalid_input, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Array2<f64>,
    /// Row indices, permuted so each leaf owns a contiguous range.
    order: Vec<usize>,
    root: Node,
}

impl KdTree {
    pub fn build(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return invalid_input("k-d tree over an empty point set");
        }
        let mut order: Vec<usize> = (0..points.nrows()).collect();
        let n = order.len();
        let root = build_node(&points, &mut order, 0, n);
        Ok(Self { points, order, root })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    /// Nearest row index and squared distance.
    pub fn nearest(&self, x: ArrayView1<f64>) -> Result<(usize, f64)> {
        if x.len() != self.points.ncols() {
            return invalid_input(format!(
                "query has dimension {} but tree points have {}",
                x.len(),
                self.points.ncols()
            ));
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(&self.root, x, &mut best);
        Ok(best)
    }

    fn search(&self, node: &Node, x: ArrayView1<f64>, best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let dist = squared_distance(x, self.points.row(i));
                    if dist < best.1 || (dist == best.1 && i < best.0) {
                        *best = (i, dist);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = x[*axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, x, best);
                if diff * diff <= best.1 {
                    self.search(far, x, best);
                }
            }
        }
    }
}

fn build_node(points: &Array2<f64>, order: &mut [usize], start: usize, end: usize) -> Node {
    if end - start <= LEAF_SIZE {
        return Node::Leaf { start, end };
    }
    let slice = &mut order[start..end];
    // split along the axis of widest spread
    let mut axis = 0;
    let mut spread = -1.0;
    for j in 0..points.ncols() {
        let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = points[[i, j]];
            (lo.min(v), hi.max(v))
        });
        if hi - lo > spread {
            spread = hi - lo;
            axis = j;
        }
    }
    if spread <= 0.0 {
        return Node::Leaf { start, end };
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[[a, axis]].total_cmp(&points[[b, axis]]));
    let value = points[[slice[mid], axis]];
    // left holds coordinates <= value, right holds >= value
    let left = Box::new(build_node(points, order, start, start + mid));
    let right = Box::new(build_node(points, order, start + mid, end));
    Node::Split { axis, value, left, right }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::nearest_neighbor;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for d in [1, 2, 5, 16] {
            let pts = Array2::from_shape_fn((300, d), |_| rng.random_range(-1.0..1.0));
            let tree = KdTree::build(pts.clone()).unwrap();
            for _ in 0..100 {
                let x = Array1::from_shape_fn(d, |_| rng.random_range(-1.2..1.2));
                assert_eq!(tree.nearest(x.view()).unwrap(), nearest_neighbor(x.view(), pts.view()).unwrap());
            }
        }
    }

    #[test]
    fn duplicated_points_keep_lowest_index() {
        // integer grid with many exact ties and duplicate rows
        let pts = Array2::from_shape_fn((120, 2), |(i, j)| ((i / (j + 2)) % 4) as f64);
        let tree = KdTree::build(pts.clone()).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let x = array![a as f64 * 0.5, b as f64 * 0.5];
                assert_eq!(tree.nearest(x.view()).unwrap(), nearest_neighbor(x.view(), pts.view()).unwrap());
            }
        }
    }

    #[test]
    fn empty_and_mismatched_queries_error() {
        assert!(KdTree::build(Array2::zeros((0, 3))).is_err());
        let tree = KdTree::build(array![[0.0, 1.0]]).unwrap();
        assert!(tree.nearest(array![0.0].view()).is_err());
    }
}
