//! Random Forest classifier and stratified k-fold cross-validation.
//!
//! Trees are CART classifiers grown on bootstrap samples with Gini impurity,
//! considering a random subset of features at each node. Every tree draws from
//! its own ChaCha stream (seed, tree index), so training is bit-identical
//! whether trees are grown serially or in parallel.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::StressLabel;
use crate::windowing::FeatureMatrix;

pub const N_CLASSES: usize = 3;
pub const DEFAULT_FOLDS: usize = 10;
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("training data holds a single class")]
    SingleClass,
    #[error("training data is empty")]
    Empty,
    #[error("row has {got} features, model expects {expected}")]
    SchemaMismatch { expected: usize, got: usize },
    #[error("class {label} has {rows} rows, fewer than the {folds} folds")]
    TooFewRows {
        label: StressLabel,
        rows: usize,
        folds: usize,
    },
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// `None` means ⌈√d⌉.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_leaf: 1,
            features_per_split: None,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn features_per_split_for(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features.max(1))
    }

    fn validate(&self, n_features: usize) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidParams("n_trees must be at least 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(ForestError::InvalidParams("min_leaf must be at least 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(ForestError::InvalidParams("max_depth must be at least 1".into()));
        }
        if let Some(m) = self.features_per_split {
            if m == 0 || m > n_features {
                return Err(ForestError::InvalidParams(format!(
                    "features_per_split {m} outside 1..={n_features}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        label: StressLabel,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    /// Root is node 0.
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, row: &[f64]) -> StressLabel {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { label } => return *label,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
    /// Accuracy over rows left out of at least one bootstrap sample.
    pub oob_accuracy: Option<f64>,
}

fn majority(counts: &[usize; N_CLASSES]) -> StressLabel {
    let mut best = 0;
    for c in 1..N_CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    StressLabel::from_index(best).expect("class index in range")
}

fn gini(counts: &[usize; N_CLASSES], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct TreeBuilder<'a> {
    rows: &'a [Vec<f64>],
    labels: &'a [usize],
    n_features: usize,
    mtry: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
    nodes: Vec<Node>,
    pairs: Vec<(f64, usize)>,
}

impl TreeBuilder<'_> {
    fn best_split(&mut self, samples: &[usize], counts: &[usize; N_CLASSES], rng: &mut ChaCha8Rng) -> Option<SplitChoice> {
        let features: Vec<usize> = if self.mtry >= self.n_features {
            (0..self.n_features).collect()
        } else {
            let mut chosen = rand::seq::index::sample(rng, self.n_features, self.mtry).into_vec();
            chosen.sort_unstable();
            chosen
        };
        let n = samples.len();
        let parent = gini(counts, n);
        let mut best: Option<SplitChoice> = None;
        for feature in features {
            self.pairs.clear();
            self.pairs
                .extend(samples.iter().map(|&i| (self.rows[i][feature], self.labels[i])));
            self.pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0usize; N_CLASSES];
            for i in 0..n - 1 {
                left[self.pairs[i].1] += 1;
                let (lo, hi) = (self.pairs[i].0, self.pairs[i + 1].0);
                let n_left = i + 1;
                if lo == hi || n_left < self.min_leaf || n - n_left < self.min_leaf {
                    continue;
                }
                let mut right = *counts;
                for c in 0..N_CLASSES {
                    right[c] -= left[c];
                }
                let weighted =
                    (n_left as f64 * gini(&left, n_left) + (n - n_left) as f64 * gini(&right, n - n_left)) / n as f64;
                let gain = parent - weighted;
                if gain > MIN_GAIN && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some(SplitChoice {
                        feature,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, samples: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut counts = [0usize; N_CLASSES];
        for &i in &samples {
            counts[self.labels[i]] += 1;
        }
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            label: majority(&counts),
        });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_reached = self.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_reached || samples.len() < 2 * self.min_leaf {
            return id;
        }
        let Some(split) = self.best_split(&samples, &counts, rng) else {
            return id;
        };
        let (left, right): (Vec<usize>, Vec<usize>) = samples
            .into_iter()
            .partition(|&i| self.rows[i][split.feature] <= split.threshold);
        let left_id = self.grow(left, depth + 1, rng);
        let right_id = self.grow(right, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: left_id,
            right: right_id,
        };
        id
    }
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

fn validate_rows(rows: &[Vec<f64>], labels: &[StressLabel]) -> Result<usize, ForestError> {
    if rows.is_empty() {
        return Err(ForestError::Empty);
    }
    let d = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(ForestError::SchemaMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(ForestError::SingleClass);
    }
    Ok(d)
}

/// Grows a forest on the given rows.
pub fn train_rows(rows: &[Vec<f64>], labels: &[StressLabel], params: &ForestParams) -> Result<ForestModel, ForestError> {
    assert_eq!(rows.len(), labels.len(), "rows and labels differ in length");
    let d = validate_rows(rows, labels)?;
    params.validate(d)?;
    let class_ids: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let n = rows.len();
    let mtry = params.features_per_split_for(d);

    let grown: Vec<(DecisionTree, Vec<bool>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(params.seed, t);
            let mut in_bag = vec![false; n];
            let sample: Vec<usize> = (0..n)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    in_bag[i] = true;
                    i
                })
                .collect();
            let mut builder = TreeBuilder {
                rows,
                labels: &class_ids,
                n_features: d,
                mtry,
                max_depth: params.max_depth,
                min_leaf: params.min_leaf,
                nodes: Vec::new(),
                pairs: Vec::with_capacity(n),
            };
            builder.grow(sample, 0, &mut rng);
            (DecisionTree { nodes: builder.nodes }, in_bag)
        })
        .collect();

    let mut votes = vec![[0usize; N_CLASSES]; n];
    for (tree, in_bag) in &grown {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            votes[i][tree.predict(&rows[i]).index()] += 1;
        }
    }
    let voted: Vec<(usize, &[usize; N_CLASSES])> = votes
        .iter()
        .enumerate()
        .filter(|(_, v)| v.iter().sum::<usize>() > 0)
        .collect();
    let oob_accuracy = (!voted.is_empty()).then(|| {
        let correct = voted.iter().filter(|(i, v)| majority(v) == labels[*i]).count();
        correct as f64 / voted.len() as f64
    });

    Ok(ForestModel {
        n_features: d,
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        oob_accuracy,
    })
}

pub fn train(matrix: &FeatureMatrix, params: &ForestParams) -> Result<ForestModel, ForestError> {
    train_rows(&matrix.rows, &matrix.labels, params)
}

impl ForestModel {
    /// Majority vote; ties go to the lowest class (Low < Medium < High).
    pub fn predict(&self, row: &[f64]) -> Result<StressLabel, ForestError> {
        if row.len() != self.n_features {
            return Err(ForestError::SchemaMismatch {
                expected: self.n_features,
                got: row.len(),
            });
        }
        Ok(majority(&self.votes(row)))
    }

    pub fn votes(&self, row: &[f64]) -> [usize; N_CLASSES] {
        let mut votes = [0usize; N_CLASSES];
        for tree in &self.trees {
            votes[tree.predict(row).index()] += 1;
        }
        votes
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

/// Cross-validated accuracy of a feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessResult {
    /// Pooled accuracy over all held-out predictions.
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub n_rows: usize,
    pub dropped_windows: usize,
}

impl FitnessResult {
    pub fn accuracy_from_confusion(confusion: &[[u64; N_CLASSES]; N_CLASSES]) -> f64 {
        let total: u64 = confusion.iter().flatten().sum();
        let diag: u64 = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
        if total == 0 {
            0.0
        } else {
            diag as f64 / total as f64
        }
    }
}

/// Stratified fold index per row: each class is shuffled and dealt
/// round-robin, continuing the rotation from one class to the next.
pub fn stratified_folds(labels: &[StressLabel], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut offset = 0;
    for class in StressLabel::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    fold
}

/// Derives the forest seed used for one fold.
fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn cv_accuracy(matrix: &FeatureMatrix, params: &ForestParams, k: usize) -> Result<FitnessResult, ForestError> {
    if k < 2 {
        return Err(ForestError::InvalidParams(format!("need at least 2 folds, got {k}")));
    }
    validate_rows(&matrix.rows, &matrix.labels)?;
    let counts = matrix.class_counts();
    for label in StressLabel::ALL {
        let rows = counts[label.index()];
        if rows > 0 && rows < k {
            return Err(ForestError::TooFewRows { label, rows, folds: k });
        }
    }

    let folds = stratified_folds(&matrix.labels, k, params.seed);
    let per_fold: Vec<Result<[[u64; N_CLASSES]; N_CLASSES], ForestError>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let (mut train_x, mut train_y) = (Vec::new(), Vec::new());
            for i in (0..matrix.len()).filter(|&i| folds[i] != f) {
                train_x.push(matrix.rows[i].clone());
                train_y.push(matrix.labels[i]);
            }
            let fold_params = ForestParams {
                seed: fold_seed(params.seed, f),
                ..*params
            };
            let model = train_rows(&train_x, &train_y, &fold_params)?;
            let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
            for i in (0..matrix.len()).filter(|&i| folds[i] == f) {
                let predicted = model.predict(&matrix.rows[i])?;
                confusion[matrix.labels[i].index()][predicted.index()] += 1;
            }
            Ok(confusion)
        })
        .collect();

    let mut pooled = [[0u64; N_CLASSES]; N_CLASSES];
    let mut fold_accuracies = Vec::with_capacity(k);
    for confusion in per_fold {
        let confusion = confusion?;
        fold_accuracies.push(FitnessResult::accuracy_from_confusion(&confusion));
        for (p, c) in pooled.iter_mut().flatten().zip(confusion.iter().flatten()) {
            *p += c;
        }
    }
    Ok(FitnessResult {
        accuracy: FitnessResult::accuracy_from_confusion(&pooled),
        fold_accuracies,
        confusion: pooled,
        n_rows: matrix.len(),
        dropped_windows: matrix.dropped_windows,
    })
}
