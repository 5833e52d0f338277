//! Metrics, per-class splits, model training by method name and the
//! source-only domain-adaptation runner.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{apply_standardizer, cap_norm, fit_standardizer, Dataset, FeatureBag, PatchExamples, StandardizationStats};
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::i2c::{build_support, nbnl_predict, nbnn_predict, NbnnModel};
use crate::ml3::{PrototypeTensor, SmoothnessQ};
use crate::stoml3::{train, TrainConfig, TrainerState, DEFAULT_INIT_SCALE};

/// Supports with at most this many dimensions are searched with a k-d tree.
pub const KDTREE_MAX_DIM: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// NaN for classes with no test bags.
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
    pub correct: u64,
}

impl EvalReport {
    fn from_pairs(class_count: usize, pairs: &[(usize, usize)]) -> Self {
        let mut confusion = vec![vec![0u64; class_count]; class_count];
        for &(truth, pred) in pairs {
            confusion[truth][pred] += 1;
        }
        let correct: u64 = (0..class_count).map(|y| confusion[y][y]).sum();
        let total = pairs.len() as u64;
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(y, row)| {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    f64::NAN
                } else {
                    row[y] as f64 / n as f64
                }
            })
            .collect();
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class,
            confusion,
            total,
            correct,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy={:.6}", self.accuracy)?;
        writeln!(f, "correct={} total={}", self.correct, self.total)?;
        for (y, acc) in self.per_class.iter().enumerate() {
            writeln!(f, "class {} accuracy={acc:.6}", y + 1)?;
        }
        write!(f, "confusion (rows = true, cols = predicted):")?;
        let width = self
            .confusion
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(self.confusion.len().to_string().len());
        write!(f, "\n{:>width$}", "")?;
        for p in 0..self.confusion.len() {
            write!(f, " {:>width$}", p + 1)?;
        }
        for (y, row) in self.confusion.iter().enumerate() {
            write!(f, "\n{:>width$}", y + 1)?;
            for v in row {
                write!(f, " {v:>width$}")?;
            }
        }
        Ok(())
    }
}

/// Applies `predict` to every bag of `test` (in parallel, results kept in bag
/// order) and tabulates the outcome.
pub fn evaluate<F>(predict: F, test: &Dataset) -> Result<EvalReport>
where
    F: Fn(&FeatureBag) -> Result<usize> + Sync,
{
    let c = test.class_count();
    let pairs = test
        .bags()
        .par_iter()
        .map(|bag| {
            let truth = bag
                .label
                .ok_or_else(|| Error::InvalidInput(format!("test bag '{}' is unlabeled", bag.image_id)))?;
            let pred = predict(bag)?;
            if pred >= c {
                return invalid_input(format!(
                    "predictor returned class {} for '{}' but there are {c} classes",
                    pred + 1,
                    bag.image_id
                ));
            }
            Ok((truth, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(c, &pairs))
}

/// Bag indices of a per-class split: `per_class_train` bags of every class are
/// drawn without replacement for training, the rest form the test set. Both
/// lists are in dataset order.
pub fn split_indices(dataset: &Dataset, per_class_train: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class = vec![Vec::new(); dataset.class_count()];
    for (i, bag) in dataset.bags().iter().enumerate() {
        match bag.label {
            Some(y) => by_class[y].push(i),
            None => return invalid_input(format!("cannot split: bag '{}' is unlabeled", bag.image_id)),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; dataset.len()];
    for (y, members) in by_class.iter().enumerate() {
        if members.len() < per_class_train {
            return invalid_input(format!(
                "class {} has {} bags, fewer than the {per_class_train} requested for training",
                y + 1,
                members.len()
            ));
        }
        if members.len() == per_class_train && per_class_train > 0 {
            warn!("class {} has no bags left for testing", y + 1);
        }
        for j in sample(&mut rng, members.len(), per_class_train) {
            is_train[members[j]] = true;
        }
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| is_train[i]);
    Ok((train, test))
}

fn subset(dataset: &Dataset, indices: &[usize]) -> Result<Dataset> {
    let bags = indices.iter().map(|&i| dataset.bags()[i].clone()).collect();
    Dataset::new(dataset.dim(), dataset.class_count(), bags)
}

pub fn split_dataset(dataset: &Dataset, per_class_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset, per_class_train, seed)?;
    Ok((subset(dataset, &train)?, subset(dataset, &test)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Nbnn,
    /// Prototype model trained with the streaming trainer and read out with
    /// the NBNL predictor; an alias of `Stoml3`.
    Nbnl,
    Stoml3,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nbnn" => Ok(Method::Nbnn),
            "nbnl" => Ok(Method::Nbnl),
            "stoml3" => Ok(Method::Stoml3),
            other => invalid_param(format!("unknown method '{other}' (expected nbnn, nbnl or stoml3)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Nbnn => "nbnn",
            Method::Nbnl => "nbnl",
            Method::Stoml3 => "stoml3",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub k: usize,
    pub lambda: f64,
    /// Smoothness used while training.
    pub q_train: SmoothnessQ,
    /// Smoothness used by the NBNL predictor.
    pub q_predict: SmoothnessQ,
    pub epochs: usize,
    pub batch: usize,
    pub init_scale: f64,
    /// Fit per-dimension standardization on the training bags.
    pub standardize: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            k: 10,
            lambda: 1.0,
            q_train: SmoothnessQ::default(),
            q_predict: SmoothnessQ::INFINITY,
            epochs: 5,
            batch: 2500,
            init_scale: DEFAULT_INIT_SCALE,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Classifier {
    Nbnn(NbnnModel),
    Nbnl { weights: PrototypeTensor, q: SmoothnessQ },
}

/// A classifier plus the descriptor preprocessing it was trained with:
/// optional standardization followed by capping to the unit ball.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub classifier: Classifier,
    pub stats: Option<StandardizationStats>,
}

/// Standardizes (when `stats` is given) and caps every descriptor of `bag`.
pub fn preprocess_bag(bag: &FeatureBag, stats: Option<&StandardizationStats>) -> Result<FeatureBag> {
    let mut out = match stats {
        Some(s) => apply_standardizer(s, bag)?,
        None => bag.clone(),
    };
    for mut row in out.patches.rows_mut() {
        let capped = cap_norm(row.view())?;
        row.assign(&capped);
    }
    Ok(out)
}

pub fn preprocess(dataset: &Dataset, stats: Option<&StandardizationStats>) -> Result<Dataset> {
    let bags = dataset
        .bags()
        .par_iter()
        .map(|bag| preprocess_bag(bag, stats))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset.dim(), dataset.class_count(), bags)
}

impl TrainedModel {
    pub fn predict(&self, bag: &FeatureBag) -> Result<usize> {
        let bag = preprocess_bag(bag, self.stats.as_ref())?;
        match &self.classifier {
            Classifier::Nbnn(model) => nbnn_predict(model, &bag),
            Classifier::Nbnl { weights, q } => nbnl_predict(weights, &bag, *q),
        }
    }

    pub fn evaluate(&self, test: &Dataset) -> Result<EvalReport> {
        evaluate(|bag| self.predict(bag), test)
    }
}

pub fn nbnn_from_dataset(train_set: &Dataset) -> Result<NbnnModel> {
    let model = build_support(train_set)?;
    if model.dim() <= KDTREE_MAX_DIM {
        model.with_kdtree()
    } else {
        Ok(model)
    }
}

/// Trains `method` on `train_set`; `seed` drives both initialization and
/// example order.
pub fn train_model(train_set: &Dataset, method: Method, hp: &Hyperparams, seed: u64) -> Result<TrainedModel> {
    let stats = if hp.standardize { Some(fit_standardizer(train_set)?) } else { None };
    let prepared = preprocess(train_set, stats.as_ref())?;
    let classifier = match method {
        Method::Nbnn => Classifier::Nbnn(nbnn_from_dataset(&prepared)?),
        Method::Nbnl | Method::Stoml3 => {
            let mut state = TrainerState::new(
                prepared.dim(),
                hp.k,
                prepared.class_count(),
                hp.lambda,
                hp.q_train,
                hp.init_scale,
                seed,
            )?;
            let examples = PatchExamples::new(&prepared)?;
            let config = TrainConfig {
                epochs: hp.epochs,
                batch_size: hp.batch,
                shuffle_seed: seed,
                shuffle: true,
            };
            let report = train(&examples, &config, &mut state)?;
            Classifier::Nbnl { weights: report.final_weights, q: hp.q_predict }
        }
    };
    Ok(TrainedModel { classifier, stats })
}

#[derive(Debug, Clone)]
pub struct DaOutcome {
    pub train_bags: usize,
    pub test_bags: usize,
    pub report: EvalReport,
}

/// Source-only domain adaptation. With `labeled_target_per_class > 0`, that
/// many seeded-sampled target bags per class join the training set and are
/// left out of the evaluation.
pub fn da_run(
    source: &Dataset,
    target: &Dataset,
    labeled_target_per_class: usize,
    method: Method,
    hp: &Hyperparams,
    seed: u64,
) -> Result<DaOutcome> {
    if source.dim() != target.dim() {
        return invalid_input(format!(
            "source dimension {} differs from target dimension {}",
            source.dim(),
            target.dim()
        ));
    }
    if source.class_count() != target.class_count() {
        return invalid_input(format!(
            "source has {} classes, target has {}",
            source.class_count(),
            target.class_count()
        ));
    }
    let (train_set, test_set) = if labeled_target_per_class == 0 {
        (source.clone(), target.clone())
    } else {
        let (picked, rest) = split_indices(target, labeled_target_per_class, seed)?;
        let mut train_set = source.clone();
        for &i in &picked {
            train_set.push(target.bags()[i].clone())?;
        }
        (train_set, subset(target, &rest)?)
    };
    let model = train_model(&train_set, method, hp, seed)?;
    let report = model.evaluate(&test_set)?;
    Ok(DaOutcome {
        train_bags: train_set.len(),
        test_bags: test_set.len(),
        report,
    })
}
