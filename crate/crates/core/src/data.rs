//! Shared domain types: descriptors, feature bags, datasets, standardization
//! and the exact nearest-neighbour primitive.
//!
//! Labels are 0-based everywhere in memory. The on-disk formats in [`crate::io`]
//! store them 1-based.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};

/// Floor applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// How descriptors are brought into the unit ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Scale only vectors whose norm exceeds one.
    #[default]
    Cap,
    /// Scale every nonzero vector to unit norm.
    Unit,
}

impl NormMode {
    pub fn apply(self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        match self {
            NormMode::Cap => cap_norm(x),
            NormMode::Unit => unit_norm(x),
        }
    }

    /// Normalizes every row of `rows` in place.
    pub fn apply_rows(self, rows: &mut Array2<f64>) -> Result<()> {
        for mut row in rows.rows_mut() {
            let scaled = self.apply(row.view())?;
            row.assign(&scaled);
        }
        Ok(())
    }
}

fn check_finite(x: ArrayView1<f64>) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return invalid_input(format!("descriptor entry {i} is not finite"));
    }
    Ok(())
}

/// Euclidean norm of a vector.
pub fn l2_norm(x: ArrayView1<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Projects `x` onto the unit ball: `x / max(1, ‖x‖₂)`.
pub fn cap_norm(x: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_finite(x)?;
    let norm = l2_norm(x);
    if norm <= 1.0 {
        return Ok(x.to_owned());
    }
    let mut y = x.mapv(|v| v / norm);
    // rounding can leave the norm one ulp above 1; shrink until it is not, so
    // that capping is exactly idempotent
    while l2_norm(y.view()) > 1.0 {
        y.mapv_inplace(|v| v * (1.0 - f64::EPSILON));
    }
    Ok(y)
}

/// Scales `x` to unit norm; the zero vector is returned unchanged.
pub fn unit_norm(x: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_finite(x)?;
    let norm = l2_norm(x);
    if norm > 0.0 {
        Ok(x.mapv(|v| v / norm))
    } else {
        Ok(x.to_owned())
    }
}

/// Squared Euclidean distance, summed in dimension order.
#[inline]
pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact one-nearest-neighbour of `x` among the rows of `support`.
///
/// Returns the row index and the squared distance. Ties go to the lowest row.
pub fn nearest_neighbor(x: ArrayView1<f64>, support: ArrayView2<f64>) -> Result<(usize, f64)> {
    if support.nrows() == 0 {
        return invalid_input("nearest neighbour over an empty support");
    }
    if support.ncols() != x.len() {
        return invalid_input(format!(
            "query has dimension {} but support rows have {}",
            x.len(),
            support.ncols()
        ));
    }
    let mut best = (0, f64::INFINITY);
    for (i, row) in support.rows().into_iter().enumerate() {
        let dist = squared_distance(x, row);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    Ok(best)
}

/// One image's set of patch descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub image_id: String,
    /// 0-based class index.
    pub label: Option<usize>,
    /// `n × d`, one descriptor per row.
    pub patches: Array2<f64>,
    /// `n × 2` normalized patch centers, when known.
    pub positions: Option<Array2<f64>>,
}

impl FeatureBag {
    pub fn new(
        image_id: impl Into<String>,
        label: Option<usize>,
        patches: Array2<f64>,
        positions: Option<Array2<f64>>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if patches.nrows() == 0 {
            return invalid_input(format!("bag '{image_id}' has no patches"));
        }
        if let Some(pos) = &positions {
            if pos.dim() != (patches.nrows(), 2) {
                return invalid_input(format!(
                    "bag '{image_id}': positions shape {:?} does not match {} patches",
                    pos.dim(),
                    patches.nrows()
                ));
            }
        }
        Ok(Self {
            image_id,
            label,
            patches,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }
}

/// An ordered collection of bags sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    bags: Vec<FeatureBag>,
    dim: usize,
    class_count: usize,
}

impl Dataset {
    /// `class_count` may be 0 only if every bag is unlabeled.
    pub fn new(dim: usize, class_count: usize, bags: Vec<FeatureBag>) -> Result<Self> {
        let mut ds = Self {
            bags: Vec::with_capacity(bags.len()),
            dim,
            class_count,
        };
        for bag in bags {
            ds.push(bag)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, bag: FeatureBag) -> Result<()> {
        if bag.dim() != self.dim {
            return invalid_input(format!(
                "bag '{}' has dimension {}, dataset expects {}",
                bag.image_id,
                bag.dim(),
                self.dim
            ));
        }
        if let Some(y) = bag.label {
            if y >= self.class_count {
                return invalid_input(format!(
                    "bag '{}' has label {} but the dataset has {} classes",
                    bag.image_id,
                    y + 1,
                    self.class_count
                ));
            }
        }
        self.bags.push(bag);
        Ok(())
    }

    pub fn bags(&self) -> &[FeatureBag] {
        &self.bags
    }

    pub fn into_bags(self) -> Vec<FeatureBag> {
        self.bags
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Number of bags.
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn patch_count(&self) -> usize {
        self.bags.iter().map(FeatureBag::len).sum()
    }

    /// Applies `f` to every bag, keeping dimension and class count checks.
    pub fn try_map_bags<F>(&self, dim: usize, mut f: F) -> Result<Dataset>
    where
        F: FnMut(&FeatureBag) -> Result<FeatureBag>,
    {
        let bags = self.bags.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Dataset::new(dim, self.class_count, bags)
    }

    /// Normalizes every descriptor with `mode`.
    pub fn normalized(&self, mode: NormMode) -> Result<Dataset> {
        self.try_map_bags(self.dim, |bag| {
            let mut out = bag.clone();
            mode.apply_rows(&mut out.patches)?;
            Ok(out)
        })
    }
}

/// Per-dimension mean and (floored) sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return invalid_input(format!(
                "descriptor has dimension {}, standardization expects {}",
                x.len(),
                self.dim()
            ));
        }
        Ok(Array1::from_iter(
            x.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s),
        ))
    }
}

/// Fits per-dimension statistics over every patch of every bag.
///
/// Uses Welford's streaming update; the deviation uses the `n − 1` convention
/// and is floored at [`STD_FLOOR`].
pub fn fit_standardizer(train: &Dataset) -> Result<StandardizationStats> {
    fit_rows(train.bags().iter().map(|b| b.patches.view()), train.dim())
}

pub(crate) fn fit_rows<'a, I>(blocks: I, dim: usize) -> Result<StandardizationStats>
where
    I: IntoIterator<Item = ArrayView2<'a, f64>>,
{
    let mut count = 0usize;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for block in blocks {
        for row in block.rows() {
            count += 1;
            let n = count as f64;
            for (j, &v) in row.iter().enumerate() {
                let delta = v - mean[j];
                mean[j] += delta / n;
                m2[j] += delta * (v - mean[j]);
            }
        }
    }
    if count == 0 {
        return invalid_input("cannot fit standardization on an empty dataset");
    }
    let denom = count.saturating_sub(1).max(1) as f64;
    let std = m2
        .iter()
        .map(|&s| if count < 2 { STD_FLOOR } else { (s / denom).sqrt().max(STD_FLOOR) })
        .collect();
    Ok(StandardizationStats { mean, std })
}

/// Replaces each patch row by `(x − mean) / std`.
pub fn apply_standardizer(stats: &StandardizationStats, bag: &FeatureBag) -> Result<FeatureBag> {
    if bag.dim() != stats.dim() {
        return invalid_input(format!(
            "bag '{}' has dimension {}, standardization expects {}",
            bag.image_id,
            bag.dim(),
            stats.dim()
        ));
    }
    let mut out = bag.clone();
    for mut row in out.patches.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
    Ok(out)
}

/// Random-access source of labeled descriptors, the unit the trainer consumes.
pub trait ExampleSource: Sync {
    fn dim(&self) -> usize;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes example `index` into `out` and returns its 0-based label.
    fn fetch(&self, index: usize, out: &mut [f64]) -> Result<usize>;
}

/// Every patch of a labeled dataset as an independent example carrying its
/// bag's label.
pub struct PatchExamples<'a> {
    dataset: &'a Dataset,
    /// Cumulative patch counts; `offsets[i]` is the first example of bag `i`.
    offsets: Vec<usize>,
}

impl<'a> PatchExamples<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        let mut offsets = Vec::with_capacity(dataset.len() + 1);
        let mut total = 0;
        for bag in dataset.bags() {
            if bag.label.is_none() {
                return invalid_input(format!("training bag '{}' is unlabeled", bag.image_id));
            }
            offsets.push(total);
            total += bag.len();
        }
        offsets.push(total);
        Ok(Self { dataset, offsets })
    }
}

impl ExampleSource for PatchExamples<'_> {
    fn dim(&self) -> usize {
        self.dataset.dim()
    }

    fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    fn fetch(&self, index: usize, out: &mut [f64]) -> Result<usize> {
        if index >= self.len() {
            return invalid_input(format!("example {index} out of range"));
        }
        let bag_idx = self.offsets.partition_point(|&o| o <= index) - 1;
        let bag = &self.dataset.bags()[bag_idx];
        let row = bag.patches.row(index - self.offsets[bag_idx]);
        for (o, v) in out.iter_mut().zip(row.iter()) {
            *o = *v;
        }
        bag.label
            .ok_or_else(|| Error::InvalidInput(format!("bag '{}' is unlabeled", bag.image_id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_dim_dataset(values: &[f64]) -> Dataset {
        let patches = Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap();
        Dataset::new(1, 1, vec![FeatureBag::new("a", Some(0), patches, None).unwrap()]).unwrap()
    }

    #[test]
    fn cap_norm_examples() {
        assert_eq!(cap_norm(array![0.0, 0.0].view()).unwrap(), array![0.0, 0.0]);
        let capped = cap_norm(array![3.0, 4.0].view()).unwrap();
        assert!((capped[0] - 0.6).abs() < 1e-15 && (capped[1] - 0.8).abs() < 1e-15);
        assert_eq!(cap_norm(array![0.3, 0.4].view()).unwrap(), array![0.3, 0.4]);
    }

    #[test]
    fn cap_norm_rejects_nan() {
        assert!(matches!(
            cap_norm(array![1.0, f64::NAN].view()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn unit_norm_scales_up() {
        let v = unit_norm(array![0.3, 0.4].view()).unwrap();
        assert!((l2_norm(v.view()) - 1.0).abs() < 1e-15);
        assert_eq!(unit_norm(array![0.0].view()).unwrap(), array![0.0]);
    }

    proptest! {
        #[test]
        fn cap_norm_idempotent_and_direction_preserving(
            v in proptest::collection::vec(-100.0f64..100.0, 1..12)
        ) {
            let x = Array1::from(v);
            let once = cap_norm(x.view()).unwrap();
            let twice = cap_norm(once.view()).unwrap();
            prop_assert_eq!(&once, &twice);
            let n_in = l2_norm(x.view());
            let n_out = l2_norm(once.view());
            prop_assert!(n_out <= 1.0 + 1e-12);
            prop_assert!(n_out <= n_in + 1e-12);
            if n_in > 1e-9 {
                let cos = x.dot(&once) / (n_in * n_out);
                prop_assert!((cos - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standardizer_two_points() {
        let stats = fit_standardizer(&single_dim_dataset(&[1.0, 3.0])).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert!((stats.std[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn standardizer_constant_dimension_hits_floor() {
        let stats = fit_standardizer(&single_dim_dataset(&[5.0, 5.0])).unwrap();
        assert_eq!(stats.mean, vec![5.0]);
        assert_eq!(stats.std, vec![STD_FLOOR]);
    }

    #[test]
    fn standardizer_empty_dataset_errors() {
        let ds = Dataset::new(3, 0, vec![]).unwrap();
        assert!(matches!(fit_standardizer(&ds), Err(Error::InvalidInput(_))));
    }

    /// Independent two-pass oracle.
    fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                mean[j] += r[j];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / (n - 1.0)).sqrt().max(STD_FLOOR)).collect();
        (mean, std)
    }

    #[test]
    fn standardizer_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..8).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        // split across several bags to exercise the cross-bag accumulation
        let bags = rows
            .chunks(30)
            .enumerate()
            .map(|(i, chunk)| {
                let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
                let patches = Array2::from_shape_vec((chunk.len(), 8), flat).unwrap();
                FeatureBag::new(format!("b{i}"), Some(0), patches, None).unwrap()
            })
            .collect();
        let ds = Dataset::new(8, 1, bags).unwrap();
        let stats = fit_standardizer(&ds).unwrap();
        let (mean, std) = two_pass(&rows);
        for j in 0..8 {
            assert!((stats.mean[j] - mean[j]).abs() < 1e-12);
            assert!((stats.std[j] - std[j]).abs() < 1e-12);
        }

        let standardized = ds
            .try_map_bags(8, |b| apply_standardizer(&stats, b))
            .unwrap();
        let all: Vec<Vec<f64>> = standardized
            .bags()
            .iter()
            .flat_map(|b| b.patches.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
            .collect();
        let (m2, s2) = two_pass(&all);
        for j in 0..8 {
            assert!(m2[j].abs() <= 1e-9);
            assert!((s2[j] - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn apply_standardizer_examples() {
        let stats = StandardizationStats { mean: vec![2.0], std: vec![1.0] };
        let bag = FeatureBag::new("x", None, array![[3.0]], None).unwrap();
        assert_eq!(apply_standardizer(&stats, &bag).unwrap().patches, array![[1.0]]);

        let stats = StandardizationStats { mean: vec![0.0], std: vec![2.0] };
        let bag = FeatureBag::new("x", None, array![[4.0]], None).unwrap();
        assert_eq!(apply_standardizer(&stats, &bag).unwrap().patches, array![[2.0]]);

        let wide = FeatureBag::new("x", None, array![[4.0, 1.0]], None).unwrap();
        assert!(matches!(apply_standardizer(&stats, &wide), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn nearest_neighbor_examples() {
        let z = array![[1.0, 0.0], [0.0, 2.0]];
        assert_eq!(nearest_neighbor(array![0.0, 0.0].view(), z.view()).unwrap(), (0, 1.0));
        assert_eq!(nearest_neighbor(array![0.0, 2.0].view(), z.view()).unwrap(), (1, 0.0));
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(nearest_neighbor(array![0.0, 0.0].view(), empty.view()).is_err());
    }

    #[test]
    fn nearest_neighbor_tie_goes_to_lowest_row() {
        let z = array![[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]];
        assert_eq!(nearest_neighbor(array![0.0, 0.0].view(), z.view()).unwrap().0, 0);
    }

    #[test]
    fn nearest_neighbor_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z = Array2::from_shape_fn((50, 6), |_| rng.random_range(-1.0..1.0));
            let x = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
            let mut oracle = (usize::MAX, f64::INFINITY);
            for i in 0..50 {
                let mut d = 0.0;
                for j in 0..6 {
                    d += (x[j] - z[[i, j]]) * (x[j] - z[[i, j]]);
                }
                if d < oracle.1 {
                    oracle = (i, d);
                }
            }
            assert_eq!(nearest_neighbor(x.view(), z.view()).unwrap(), oracle);
        }
    }

    #[test]
    fn patch_examples_walk_bags_in_order() {
        let a = FeatureBag::new("a", Some(1), array![[1.0], [2.0]], None).unwrap();
        let b = FeatureBag::new("b", Some(0), array![[3.0]], None).unwrap();
        let ds = Dataset::new(1, 2, vec![a, b]).unwrap();
        let src = PatchExamples::new(&ds).unwrap();
        assert_eq!(src.len(), 3);
        let mut buf = [0.0];
        assert_eq!(src.fetch(1, &mut buf).unwrap(), 1);
        assert_eq!(buf, [2.0]);
        assert_eq!(src.fetch(2, &mut buf).unwrap(), 0);
        assert_eq!(buf, [3.0]);
        assert!(src.fetch(3, &mut buf).is_err());
    }

    #[test]
    fn dataset_rejects_mismatched_bags() {
        let bag = FeatureBag::new("a", Some(3), array![[1.0, 2.0]], None).unwrap();
        assert!(Dataset::new(2, 2, vec![bag.clone()]).is_err());
        assert!(Dataset::new(3, 5, vec![bag]).is_err());
        assert!(FeatureBag::new("e", None, Array2::zeros((0, 2)), None).is_err());
    }
}
