//! Base-ranker training: regression trees, LambdaMART ensembles and the
//! RankNet pairwise network, plus model scoring and serialization.

mod lambdamart;
mod model;
mod ranknet;
mod tree;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, QueryGroup};
use crate::metrics::{self, MetricError, Ranking};

pub use lambdamart::{lambda_gradients, pairwise_logistic_loss, swap_delta_ndcg, train_lambdamart, TreeEnsemble};
pub use model::{Model, ModelKind, SavedModel};
pub use ranknet::{train_ranknet, PairwiseNet};
pub use tree::{fit_regression_tree, Node, RegressionTree, TreeTrainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty input")]
    EmptyInput,
    #[error("training set has no query with two or more distinct labels")]
    NoUsableQueries,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid weights: {0}")]
    BadWeights(String),
    #[error("invalid training parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite score at boosting round {round}")]
    NonFiniteScore { round: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("model format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Hyperparameters shared by both trainers; each trainer reads the fields
/// that apply to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    /// Boosting rounds (trees) or training epochs.
    pub num_rounds: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_instances_per_leaf: usize,
    pub ndcg_cutoff: usize,
    /// Scale of the pairwise logistic.
    pub sigma: f64,
    pub hidden_size: usize,
    /// Stop after this many rounds without a validation improvement.
    pub early_stop_patience: usize,
    /// RankNet pair budget per query and epoch.
    pub max_pairs_per_query: usize,
    pub seed: u64,
}

impl TrainParams {
    /// 1000 trees, 10 leaves, shrinkage 0.1, NDCG@10.
    pub fn lambdamart() -> Self {
        TrainParams {
            num_rounds: 1000,
            learning_rate: 0.1,
            max_leaves: 10,
            min_instances_per_leaf: 1,
            ndcg_cutoff: 10,
            sigma: 1.0,
            hidden_size: 10,
            early_stop_patience: 100,
            max_pairs_per_query: 1000,
            seed: 0,
        }
    }

    /// One hidden layer of 10 units, 100 epochs, learning rate 5e-5.
    pub fn ranknet() -> Self {
        TrainParams {
            num_rounds: 100,
            learning_rate: 5e-5,
            early_stop_patience: 100,
            ..Self::lambdamart()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(TrainError::InvalidParams(what.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if self.max_leaves == 0 || self.min_instances_per_leaf == 0 {
            return bad("max_leaves and min_instances_per_leaf must be positive");
        }
        if self.ndcg_cutoff == 0 {
            return bad("ndcg_cutoff must be at least 1");
        }
        if self.hidden_size == 0 || self.max_pairs_per_query == 0 || self.early_stop_patience == 0 {
            return bad("hidden_size, max_pairs_per_query and early_stop_patience must be positive");
        }
        Ok(())
    }
}

/// Anything that maps a feature vector to a ranking score.
pub trait Scorer {
    fn feature_dim(&self) -> usize;

    /// Scores a vector already known to have `feature_dim` entries.
    fn score_unchecked(&self, features: &[f64]) -> f64;

    fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dim() {
            return Err(TrainError::DimensionMismatch {
                expected: self.feature_dim(),
                got: features.len(),
            });
        }
        Ok(self.score_unchecked(features))
    }

    /// Scores every document of a query, indexed by doc ordinal.
    fn score_group(&self, group: &QueryGroup) -> Result<Vec<f64>> {
        group.instances.iter().map(|inst| self.score(&inst.features)).collect()
    }
}

/// Ranks a query's documents by model score.
pub fn rank_query<S: Scorer + ?Sized>(model: &S, group: &QueryGroup) -> Result<Ranking> {
    let scores = model.score_group(group)?;
    Ok(metrics::rank_by_scores(&scores)?.with_query_id(group.query_id.clone()))
}

/// Queries flattened into one row-major point list.
pub(crate) struct FlatQueries<'a> {
    pub rows: Vec<&'a [f64]>,
    pub labels: Vec<u8>,
    pub ranges: Vec<std::ops::Range<usize>>,
}

impl<'a> FlatQueries<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        let mut rows = Vec::with_capacity(dataset.num_instances());
        let mut labels = Vec::with_capacity(dataset.num_instances());
        let mut ranges = Vec::with_capacity(dataset.num_queries());
        for group in &dataset.groups {
            let start = rows.len();
            for inst in &group.instances {
                rows.push(inst.features.as_slice());
                labels.push(inst.label);
            }
            ranges.push(start..rows.len());
        }
        FlatQueries { rows, labels, ranges }
    }

    /// Mean NDCG@k of `scores` over all queries; zero-ideal queries count as 0.
    pub fn mean_ndcg(&self, scores: &[f64], k: usize) -> Result<f64> {
        let mut sum = 0.0;
        for range in &self.ranges {
            let ranking = metrics::rank_by_scores(&scores[range.clone()])?;
            let labels = ranking.in_rank_order(&self.labels[range.clone()]);
            sum += metrics::ndcg_at_k(&labels, k)?;
        }
        Ok(if self.ranges.is_empty() {
            0.0
        } else {
            sum / self.ranges.len() as f64
        })
    }

    /// Whether a query has at least two distinct labels.
    pub fn is_trainable(&self, q: usize) -> bool {
        let labels = &self.labels[self.ranges[q].clone()];
        labels.len() >= 2 && labels.iter().any(|&l| l != labels[0])
    }
}
