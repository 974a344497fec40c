//! Secondary training data and interpreter models.
//!
//! A base ranker's output ordering is bucketed into relevance grades, an
//! interpreter ensemble is trained on those grades over all features or an
//! interpretable subset, and the two rankers are compared query by query.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{project_features, DataError, Dataset, FeatureSubset, QueryGroup};
use crate::ltr::{train_lambdamart, Scorer, TrainError, TrainParams, TreeEnsemble};
use crate::metrics::{self, MetricError, MetricResult, Ranking, TopKSet};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid secondary label config: {0}")]
    InvalidConfig(String),
    #[error("no external score for query {query_id} document {doc_ordinal}")]
    MissingScore { query_id: String, doc_ordinal: usize },
    #[error("score table line {line}: {reason}")]
    TableParse { line: usize, reason: String },
    #[error("secondary training set is empty")]
    EmptyTrain,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// Rank-bucket labeling: the first `bucket_size` positions get
/// `top_label`, the next `bucket_size` one grade less, down to
/// `floor_label` for everything after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecondaryLabelConfig {
    pub bucket_size: usize,
    pub top_label: u8,
    pub floor_label: u8,
}

impl Default for SecondaryLabelConfig {
    fn default() -> Self {
        SecondaryLabelConfig {
            bucket_size: 5,
            top_label: 4,
            floor_label: 0,
        }
    }
}

impl SecondaryLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bucket_size == 0 {
            return Err(DistillError::InvalidConfig("bucket_size must be at least 1".into()));
        }
        if self.top_label <= self.floor_label {
            return Err(DistillError::InvalidConfig("top_label must exceed floor_label".into()));
        }
        if self.top_label > crate::data::MAX_LABEL {
            return Err(DistillError::InvalidConfig(format!(
                "top_label must be at most {}",
                crate::data::MAX_LABEL
            )));
        }
        Ok(())
    }

    /// Grade for a 0-based rank position.
    pub fn label_at(&self, position: usize) -> u8 {
        let drop = position / self.bucket_size;
        let span = usize::from(self.top_label - self.floor_label);
        self.top_label - drop.min(span) as u8
    }
}

/// Secondary labels indexed by doc ordinal.
pub fn generate_secondary_labels(ranking: &Ranking, config: &SecondaryLabelConfig) -> Result<Vec<u8>> {
    config.validate()?;
    let mut labels = vec![0u8; ranking.len()];
    for (position, &doc) in ranking.ordered_docs.iter().enumerate() {
        labels[doc] = config.label_at(position);
    }
    Ok(labels)
}

/// Anything that can score every document of a query: a trained model or a
/// table of scores produced elsewhere.
pub trait ScoreSource: Sync {
    fn scores_for(&self, group: &QueryGroup) -> Result<Vec<f64>>;

    fn rank(&self, group: &QueryGroup) -> Result<Ranking> {
        let scores = self.scores_for(group)?;
        Ok(metrics::rank_by_scores(&scores)?.with_query_id(group.query_id.clone()))
    }
}

impl<T: Scorer + Sync> ScoreSource for T {
    fn scores_for(&self, group: &QueryGroup) -> Result<Vec<f64>> {
        Ok(self.score_group(group)?)
    }
}

/// Scores keyed by `(query_id, doc_ordinal)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScoreTable {
    scores: HashMap<(String, usize), f64>,
}

impl ExternalScoreTable {
    pub fn insert(&mut self, query_id: impl Into<String>, doc_ordinal: usize, score: f64) {
        self.scores.insert((query_id.into(), doc_ordinal), score);
    }

    pub fn get(&self, query_id: &str, doc_ordinal: usize) -> Option<f64> {
        self.scores.get(&(query_id.to_string(), doc_ordinal)).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Records `source`'s score for every document of `dataset`.
    pub fn from_source<S: ScoreSource + ?Sized>(source: &S, dataset: &Dataset) -> Result<Self> {
        let mut table = ExternalScoreTable::default();
        for group in &dataset.groups {
            for (ordinal, score) in source.scores_for(group)?.into_iter().enumerate() {
                table.insert(group.query_id.clone(), ordinal, score);
            }
        }
        Ok(table)
    }

    /// Parses `<query_id>\t<doc_ordinal>\t<score>` lines; blank lines and
    /// `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = ExternalScoreTable::default();
        for (lineno, line) in text.lines().enumerate() {
            let err = |reason: String| DistillError::TableParse { line: lineno + 1, reason };
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            let [qid, ordinal, score] = fields[..] else {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let ordinal: usize = ordinal
                .trim()
                .parse()
                .map_err(|_| err(format!("bad doc ordinal {ordinal:?}")))?;
            let score: f64 = score
                .trim()
                .parse()
                .ok()
                .filter(|s: &f64| s.is_finite())
                .ok_or_else(|| err(format!("bad score {score:?}")))?;
            let qid = qid.trim();
            if qid.is_empty() {
                return Err(err("empty query id".into()));
            }
            if table.scores.insert((qid.to_string(), ordinal), score).is_some() {
                return Err(err(format!("duplicate entry for query {qid} document {ordinal}")));
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DistillError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Writes entries sorted by query id then ordinal.
    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut keys: Vec<&(String, usize)> = self.scores.keys().collect();
        keys.sort();
        for key in keys {
            writeln!(out, "{}\t{}\t{}", key.0, key.1, self.scores[key])?;
        }
        out.flush()
    }
}

impl ScoreSource for ExternalScoreTable {
    fn scores_for(&self, group: &QueryGroup) -> Result<Vec<f64>> {
        (0..group.len())
            .map(|ordinal| {
                self.get(&group.query_id, ordinal).ok_or_else(|| DistillError::MissingScore {
                    query_id: group.query_id.clone(),
                    doc_ordinal: ordinal,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginalLabel {
    pub query_id: String,
    pub doc_ordinal: usize,
    pub label: u8,
}

/// A relabeled dataset plus the human labels it replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondaryDataset {
    pub dataset: Dataset,
    pub original_labels: Vec<OriginalLabel>,
}

impl SecondaryDataset {
    /// `<query_id>\t<doc_ordinal>\t<original_label>` lines.
    pub fn sidecar_text(&self) -> String {
        let mut text = String::new();
        for entry in &self.original_labels {
            let _ = writeln!(text, "{}\t{}\t{}", entry.query_id, entry.doc_ordinal, entry.label);
        }
        text
    }
}

/// Replaces every label with the rank-bucket grade of the base ranking.
/// Features, grouping and query order are untouched.
pub fn build_secondary_dataset<S: ScoreSource + ?Sized>(
    base: &S,
    queries: &Dataset,
    config: &SecondaryLabelConfig,
) -> Result<SecondaryDataset> {
    config.validate()?;
    let relabeled: Vec<(QueryGroup, Vec<OriginalLabel>)> = queries
        .groups
        .par_iter()
        .map(|group| {
            let ranking = base.rank(group)?;
            let labels = generate_secondary_labels(&ranking, config)?;
            let mut group = group.clone();
            let originals = group
                .instances
                .iter_mut()
                .zip(labels)
                .map(|(inst, label)| OriginalLabel {
                    query_id: inst.query_id.clone(),
                    doc_ordinal: inst.doc_ordinal,
                    label: std::mem::replace(&mut inst.label, label),
                })
                .collect();
            Ok((group, originals))
        })
        .collect::<Result<_>>()?;
    let (groups, originals): (Vec<_>, Vec<_>) = relabeled.into_iter().unzip();
    Ok(SecondaryDataset {
        dataset: Dataset {
            groups,
            feature_dim: queries.feature_dim,
        },
        original_labels: originals.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRegime {
    /// All features (AM).
    All,
    /// Only the listed features (IM).
    Subset(FeatureSubset),
}

impl FeatureRegime {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureRegime::All => "AM",
            FeatureRegime::Subset(_) => "IM",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpreterSpec {
    pub regime: FeatureRegime,
    pub params: TrainParams,
}

/// Trains a LambdaMART interpreter on secondary data. Under a subset
/// regime the model is trained on the projected features and its split
/// columns are mapped back, so it scores full-width vectors while only
/// reading subset features.
pub fn train_interpreter(
    secondary_train: &Dataset,
    secondary_valid: &Dataset,
    spec: &InterpreterSpec,
) -> Result<TreeEnsemble> {
    if secondary_train.is_empty() {
        return Err(DistillError::EmptyTrain);
    }
    match &spec.regime {
        FeatureRegime::All => Ok(train_lambdamart(secondary_train, secondary_valid, &spec.params)?),
        FeatureRegime::Subset(subset) => {
            let train = project_features(secondary_train, subset)?;
            let valid = if secondary_valid.is_empty() {
                Dataset {
                    groups: Vec::new(),
                    feature_dim: subset.len(),
                }
            } else {
                project_features(secondary_valid, subset)?
            };
            let model = train_lambdamart(&train, &valid, &spec.params)?;
            Ok(model.remap_features(&subset.columns(), secondary_train.feature_dim)?)
        }
    }
}

/// Evaluation settings for fidelity runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub k: usize,
    pub precision_threshold: u8,
    pub tau_at_k_set: TopKSet,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: 10,
            precision_threshold: 1,
            tau_at_k_set: TopKSet::BaseTopK,
        }
    }
}

/// One query's agreement and quality figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFidelity {
    pub query_id: String,
    pub ndcg_at_k: f64,
    pub precision_at_k: f64,
    /// `None` for single-document queries.
    pub tau: Option<f64>,
    /// `None` when the compared top-k set has fewer than two documents.
    pub tau_at_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityOutcome {
    pub summary: MetricResult,
    /// Sorted by query id.
    pub per_query: Vec<QueryFidelity>,
}

fn query_fidelity<I, B>(interpreter: &I, base: &B, group: &QueryGroup, opts: &EvalOptions) -> Result<QueryFidelity>
where
    I: ScoreSource + ?Sized,
    B: ScoreSource + ?Sized,
{
    let interp_rank = interpreter.rank(group)?;
    let base_rank = base.rank(group)?;
    let labels = interp_rank.in_rank_order(&group.labels());
    let (tau, tau_at_k) = if group.len() >= 2 {
        let tau = metrics::kendall_tau(&base_rank, &interp_rank)?;
        let tau_at_k = match metrics::kendall_tau_at_k(&base_rank, &interp_rank, opts.k.max(2), opts.tau_at_k_set) {
            Ok(t) => Some(t),
            Err(MetricError::TooFewDocs(_)) => None,
            Err(e) => return Err(e.into()),
        };
        (Some(tau), tau_at_k)
    } else {
        (None, None)
    };
    Ok(QueryFidelity {
        query_id: group.query_id.clone(),
        ndcg_at_k: metrics::ndcg_at_k(&labels, opts.k)?,
        precision_at_k: metrics::precision_at_k(&labels, opts.k, opts.precision_threshold)?,
        tau,
        tau_at_k,
    })
}

/// Compares an interpreter with the base ranker on `test`.
///
/// tau and tau@k measure agreement with the base ranking; NDCG@k and
/// Precision@k grade the interpreter's ranking against the test set's own
/// labels. All four are macro-averaged over queries in ascending query-id
/// order.
pub fn fidelity<I, B>(interpreter: &I, base: &B, test: &Dataset, opts: &EvalOptions) -> Result<FidelityOutcome>
where
    I: ScoreSource + ?Sized,
    B: ScoreSource + ?Sized,
{
    if opts.k == 0 {
        return Err(MetricError::BadCutoff { k: 0, min: 1 }.into());
    }
    let mut per_query: Vec<QueryFidelity> = test
        .groups
        .par_iter()
        .map(|group| query_fidelity(interpreter, base, group, opts))
        .collect::<Result<_>>()?;
    per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let summary = MetricResult {
        k: opts.k,
        ndcg_at_k: metrics::mean(per_query.iter().map(|q| q.ndcg_at_k)).unwrap_or(0.0),
        precision_at_k: metrics::mean(per_query.iter().map(|q| q.precision_at_k)).unwrap_or(0.0),
        tau: metrics::mean(per_query.iter().filter_map(|q| q.tau)),
        tau_at_k: metrics::mean(per_query.iter().filter_map(|q| q.tau_at_k)),
    };
    Ok(FidelityOutcome { summary, per_query })
}
