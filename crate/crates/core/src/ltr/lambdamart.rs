use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{Node, RegressionTree, TreeTrainer};
use super::{FlatQueries, Result, Scorer, TrainError, TrainParams};
use crate::data::Dataset;
use crate::metrics::{discount, gain, ideal_dcg_at_k, rank_by_scores};

/// Floor for the summed pseudo-Hessian in a Newton leaf step.
const HESSIAN_FLOOR: f64 = 1e-9;

/// Additive ensemble: `score(x) = sum_t learning_rate * tree_t(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub feature_dim: usize,
}

impl TreeEnsemble {
    pub fn new(feature_dim: usize, learning_rate: f64) -> Self {
        TreeEnsemble {
            trees: Vec::new(),
            learning_rate,
            feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    /// Split counts per 0-based feature column.
    pub fn feature_usage(&self) -> Vec<usize> {
        let mut usage = vec![0; self.feature_dim];
        for tree in &self.trees {
            for f in tree.split_features() {
                usage[f] += 1;
            }
        }
        usage
    }

    /// Rewrites split columns through `columns` (projected column -> original
    /// column) so a model trained on a feature projection scores unprojected
    /// vectors of length `feature_dim`.
    pub fn remap_features(&self, columns: &[usize], feature_dim: usize) -> Result<TreeEnsemble> {
        let mut remapped = self.clone();
        remapped.feature_dim = feature_dim;
        for tree in &mut remapped.trees {
            for node in &mut tree.nodes {
                if let Node::Split { feature, .. } = node {
                    *feature = *columns.get(*feature).filter(|&&c| c < feature_dim).ok_or(
                        TrainError::DimensionMismatch {
                            expected: columns.len(),
                            got: *feature + 1,
                        },
                    )?;
                }
            }
        }
        Ok(remapped)
    }
}

impl Scorer for TreeEnsemble {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn score_unchecked(&self, features: &[f64]) -> f64 {
        self.trees
            .iter()
            .fold(0.0, |acc, tree| acc + self.learning_rate * tree.predict(features))
    }
}

#[inline]
fn truncated_discount(position: usize, cutoff: usize) -> f64 {
    if position < cutoff {
        discount(position)
    } else {
        0.0
    }
}

#[inline]
fn delta_ndcg(gain_a: f64, gain_b: f64, pos_a: usize, pos_b: usize, cutoff: usize, ideal: f64) -> f64 {
    (gain_a - gain_b) * (truncated_discount(pos_b, cutoff) - truncated_discount(pos_a, cutoff)) / ideal
}

/// Signed NDCG@cutoff change from swapping the documents at rank positions
/// `pos_a` and `pos_b` (0-based), given labels in rank order and the
/// query's ideal DCG. Zero when the ideal DCG is zero.
pub fn swap_delta_ndcg(labels_in_rank_order: &[u8], pos_a: usize, pos_b: usize, cutoff: usize, ideal: f64) -> f64 {
    if ideal == 0.0 {
        return 0.0;
    }
    delta_ndcg(
        gain(labels_in_rank_order[pos_a]),
        gain(labels_in_rank_order[pos_b]),
        pos_a,
        pos_b,
        cutoff,
        ideal,
    )
}

/// Lambda gradients and pseudo-Hessians for one query, indexed like
/// `labels` and `scores`.
pub fn lambda_gradients(labels: &[u8], scores: &[f64], cutoff: usize, sigma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = labels.len();
    let mut lambdas = vec![0.0; n];
    let mut hessians = vec![0.0; n];
    let ideal = ideal_dcg_at_k(labels, cutoff);
    if ideal == 0.0 || n < 2 {
        return Ok((lambdas, hessians));
    }
    let positions = rank_by_scores(scores)?.positions();
    let gains: Vec<f64> = labels.iter().map(|&l| gain(l)).collect();
    for i in 0..n {
        for j in 0..n {
            if labels[i] <= labels[j] {
                continue;
            }
            let delta = delta_ndcg(gains[i], gains[j], positions[i], positions[j], cutoff, ideal).abs();
            if delta == 0.0 {
                continue;
            }
            let rho = 1.0 / (1.0 + (sigma * (scores[i] - scores[j])).exp());
            let lambda = sigma * delta * rho;
            let hessian = sigma * sigma * delta * rho * (1.0 - rho);
            lambdas[i] += lambda;
            lambdas[j] -= lambda;
            hessians[i] += hessian;
            hessians[j] += hessian;
        }
    }
    Ok((lambdas, hessians))
}

/// `ln(1 + exp(-x))` without overflow.
#[inline]
pub(crate) fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Sum of `ln(1 + exp(-sigma (s_i - s_j)))` over pairs with `label_i > label_j`.
pub fn pairwise_logistic_loss(labels: &[u8], scores: &[f64], sigma: f64) -> f64 {
    let mut loss = 0.0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] > labels[j] {
                loss += softplus_neg(sigma * (scores[i] - scores[j]));
            }
        }
    }
    loss
}

/// Trains a LambdaMART ensemble optimizing NDCG@`ndcg_cutoff`.
///
/// Each round fits a regression tree to the lambda gradients, replaces its
/// leaves with Newton steps and adds it with shrinkage. The result is cut
/// back to the round with the best validation NDCG (training NDCG when the
/// validation set is empty).
pub fn train_lambdamart(train: &Dataset, validation: &Dataset, params: &TrainParams) -> Result<TreeEnsemble> {
    params.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    if !validation.is_empty() && validation.feature_dim != train.feature_dim {
        return Err(TrainError::DimensionMismatch {
            expected: train.feature_dim,
            got: validation.feature_dim,
        });
    }
    let flat = FlatQueries::new(train);
    let usable: Vec<usize> = (0..flat.ranges.len()).filter(|&q| flat.is_trainable(q)).collect();
    if usable.is_empty() {
        return Err(TrainError::NoUsableQueries);
    }
    let skipped = flat.ranges.len() - usable.len();
    if skipped > 0 {
        warn!("skipping {skipped} training queries without two distinct labels");
    }
    let vflat = FlatQueries::new(validation);
    let select_on_train = vflat.ranges.is_empty();

    let trainer = TreeTrainer::new(&flat.rows)?;
    let n = flat.rows.len();
    let weights = vec![1.0; n];
    let mut scores = vec![0.0; n];
    let mut vscores = vec![0.0; vflat.rows.len()];
    let mut ensemble = TreeEnsemble::new(train.feature_dim, params.learning_rate);
    let (mut best_metric, mut best_len) = (f64::NEG_INFINITY, 0usize);

    for round in 1..=params.num_rounds {
        let per_query: Vec<(Vec<f64>, Vec<f64>)> = usable
            .par_iter()
            .map(|&q| {
                let range = flat.ranges[q].clone();
                lambda_gradients(&flat.labels[range.clone()], &scores[range], params.ndcg_cutoff, params.sigma)
            })
            .collect::<Result<_>>()?;
        let mut lambdas = vec![0.0; n];
        let mut hessians = vec![0.0; n];
        for (&q, (l, h)) in usable.iter().zip(per_query) {
            let start = flat.ranges[q].start;
            lambdas[start..start + l.len()].copy_from_slice(&l);
            hessians[start..start + h.len()].copy_from_slice(&h);
        }

        let (mut tree, leaf_of) = trainer.fit(&lambdas, &weights, params.max_leaves, params.min_instances_per_leaf)?;
        let mut sum_lambda = vec![0.0; tree.nodes.len()];
        let mut sum_hessian = vec![0.0; tree.nodes.len()];
        for i in 0..n {
            sum_lambda[leaf_of[i]] += lambdas[i];
            sum_hessian[leaf_of[i]] += hessians[i];
        }
        let mut leaf_values = vec![0.0; tree.nodes.len()];
        for node in 0..tree.nodes.len() {
            if matches!(tree.nodes[node], Node::Leaf { .. }) {
                leaf_values[node] = sum_lambda[node] / sum_hessian[node].max(HESSIAN_FLOOR);
                tree.set_leaf_value(node, leaf_values[node]);
            }
        }

        for (s, &leaf) in scores.iter_mut().zip(&leaf_of) {
            *s += params.learning_rate * leaf_values[leaf];
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(TrainError::NonFiniteScore { round });
        }
        for (s, row) in vscores.iter_mut().zip(&vflat.rows) {
            *s += params.learning_rate * tree.predict(row);
        }
        if vscores.iter().any(|s| !s.is_finite()) {
            return Err(TrainError::NonFiniteScore { round });
        }
        ensemble.trees.push(tree);

        let metric = if select_on_train {
            flat.mean_ndcg(&scores, params.ndcg_cutoff)?
        } else {
            vflat.mean_ndcg(&vscores, params.ndcg_cutoff)?
        };
        debug!("round {round}: ndcg@{} = {metric:.6}", params.ndcg_cutoff);
        if metric > best_metric {
            best_metric = metric;
            best_len = round;
        } else if round - best_len >= params.early_stop_patience {
            debug!("early stop at round {round}, best round {best_len}");
            break;
        }
    }
    ensemble.trees.truncate(best_len);
    Ok(ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_dataset;
    use crate::metrics::ndcg_at_k;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_ensemble_scores_zero() {
        assert_eq!(TreeEnsemble::new(3, 0.1).score(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_leaf_scores_learning_rate_times_value() {
        let mut e = TreeEnsemble::new(2, 0.25);
        e.trees.push(RegressionTree::leaf(2.0));
        assert_eq!(e.score(&[0.0, 0.0]).unwrap(), 0.5);
        assert!(e.score(&[0.0]).is_err());
    }

    #[test]
    fn routing_follows_threshold() {
        let tree = RegressionTree {
            nodes: vec![
                Node::Split { feature: 1, threshold: 0.5, left: 1, right: 2 },
                Node::Leaf { value: -1.0 },
                Node::Leaf { value: 3.0 },
            ],
            max_leaves: 2,
        };
        let e = TreeEnsemble { trees: vec![tree], learning_rate: 1.0, feature_dim: 2 };
        assert_eq!(e.score(&[9.0, 0.5]).unwrap(), -1.0);
        assert_eq!(e.score(&[9.0, 0.6]).unwrap(), 3.0);
    }

    #[test]
    fn remap_translates_columns() {
        let tree = RegressionTree {
            nodes: vec![
                Node::Split { feature: 1, threshold: 0.5, left: 1, right: 2 },
                Node::Leaf { value: -1.0 },
                Node::Leaf { value: 3.0 },
            ],
            max_leaves: 2,
        };
        let e = TreeEnsemble { trees: vec![tree], learning_rate: 1.0, feature_dim: 2 };
        let wide = e.remap_features(&[0, 4], 6).unwrap();
        assert_eq!(wide.feature_usage(), vec![0, 0, 0, 0, 1, 0]);
        assert_eq!(wide.score(&[0.0, 0.0, 0.0, 0.0, 0.9, 0.0]).unwrap(), 3.0);
        assert!(e.remap_features(&[0], 6).is_err());
    }

    #[test]
    fn swap_delta_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(1..=20);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=4)).collect();
            let cutoff = rng.gen_range(1..=12);
            let ideal = ideal_dcg_at_k(&labels, cutoff);
            let before = ndcg_at_k(&labels, cutoff).unwrap();
            for a in 0..n {
                for b in 0..n {
                    let mut swapped = labels.clone();
                    swapped.swap(a, b);
                    let after = ndcg_at_k(&swapped, cutoff).unwrap();
                    let incremental = swap_delta_ndcg(&labels, a, b, cutoff, ideal);
                    assert!((incremental - (after - before)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn lambdas_balance_within_a_query() {
        let labels = [2, 0, 1, 0, 4];
        let scores = [0.3, 0.1, -0.2, 0.5, 0.0];
        let (l, h) = lambda_gradients(&labels, &scores, 10, 1.0).unwrap();
        assert!(l.iter().sum::<f64>().abs() < 1e-12);
        assert!(h.iter().all(|&x| x >= 0.0));
        // the label-4 doc sits mid-list and must be pushed up
        assert!(l[4] > 0.0);
        let (l, _) = lambda_gradients(&[1, 1, 1], &[0.0, 1.0, 2.0], 10, 1.0).unwrap();
        assert_eq!(l, vec![0.0; 3]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus_neg(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus_neg(1000.0) >= 0.0 && softplus_neg(1000.0) < 1e-300);
        assert!((softplus_neg(-1000.0) - 1000.0).abs() < 1e-9);
    }

    fn separable() -> Dataset {
        read_dataset("1 qid:1 1:1.0\n0 qid:1 1:0.0\n".as_bytes()).unwrap()
    }

    #[test]
    fn solves_separable_pair() {
        let d = separable();
        let params = TrainParams { num_rounds: 10, ..TrainParams::lambdamart() };
        let model = train_lambdamart(&d, &d, &params).unwrap();
        assert!(model.score(&[1.0]).unwrap() > model.score(&[0.0]).unwrap());
        let flat = FlatQueries::new(&d);
        let scores: Vec<f64> = flat.rows.iter().map(|r| model.score(r).unwrap()).collect();
        assert_eq!(flat.mean_ndcg(&scores, 10).unwrap(), 1.0);
    }

    #[test]
    fn rejects_untrainable_data() {
        let flat = read_dataset("1 qid:1 1:1.0\n1 qid:1 1:0.0\n".as_bytes()).unwrap();
        let params = TrainParams { num_rounds: 3, ..TrainParams::lambdamart() };
        assert!(matches!(train_lambdamart(&flat, &flat, &params), Err(TrainError::NoUsableQueries)));
        let empty = Dataset { groups: vec![], feature_dim: 1 };
        assert!(matches!(train_lambdamart(&empty, &empty, &params), Err(TrainError::EmptyInput)));
    }

    fn random_dataset(seed: u64, queries: usize, docs: usize, dim: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = String::new();
        for q in 0..queries {
            let mut rows: Vec<(f64, Vec<f64>)> = (0..docs)
                .map(|_| {
                    let x: Vec<f64> = (0..dim).map(|_| rng.gen()).collect();
                    (x[0] + 0.5 * x[1] + 0.2 * rng.gen::<f64>(), x)
                })
                .collect();
            rows.shuffle(&mut rng);
            let mut utilities: Vec<f64> = rows.iter().map(|r| r.0).collect();
            utilities.sort_by(|a, b| b.total_cmp(a));
            for (u, x) in &rows {
                let rank = utilities.iter().position(|v| v == u).unwrap();
                let label = 4usize.saturating_sub(rank * 5 / docs);
                text.push_str(&format!("{label} qid:{q}"));
                for (i, v) in x.iter().enumerate() {
                    text.push_str(&format!(" {}:{v}", i + 1));
                }
                text.push('\n');
            }
        }
        read_dataset(text.as_bytes()).unwrap()
    }

    #[test]
    fn training_pairwise_loss_does_not_increase() {
        let d = random_dataset(5, 8, 12, 3);
        let flat = FlatQueries::new(&d);
        let params = TrainParams {
            num_rounds: 50,
            learning_rate: 0.1,
            early_stop_patience: 1000,
            ..TrainParams::lambdamart()
        };
        let empty = Dataset { groups: vec![], feature_dim: d.feature_dim };
        // the selection on training NDCG may cut trees, so check prefixes of a full run
        let full = {
            let mut m = train_lambdamart(&d, &empty, &TrainParams { num_rounds: 50, ..params.clone() }).unwrap();
            m.trees.truncate(50);
            m
        };
        let loss = |m: &TreeEnsemble| -> f64 {
            flat.ranges
                .iter()
                .map(|r| {
                    let s: Vec<f64> = flat.rows[r.clone()].iter().map(|x| m.score(x).unwrap()).collect();
                    pairwise_logistic_loss(&flat.labels[r.clone()], &s, params.sigma)
                })
                .sum()
        };
        let mut prev = f64::INFINITY;
        for t in 0..=full.len() {
            let prefix = TreeEnsemble { trees: full.trees[..t].to_vec(), ..full.clone() };
            let l = loss(&prefix);
            assert!(l <= prev + 1e-9, "loss rose at tree {t}: {prev} -> {l}");
            prev = l;
        }
    }

    #[test]
    fn returned_model_is_best_on_validation() {
        let train = random_dataset(1, 20, 10, 4);
        let valid = random_dataset(2, 10, 10, 4);
        let params = TrainParams { num_rounds: 30, early_stop_patience: 30, ..TrainParams::lambdamart() };
        let model = train_lambdamart(&train, &valid, &params).unwrap();
        let vflat = FlatQueries::new(&valid);
        let ndcg = |m: &TreeEnsemble| {
            let s: Vec<f64> = vflat.rows.iter().map(|r| m.score(r).unwrap()).collect();
            vflat.mean_ndcg(&s, 10).unwrap()
        };
        let first = TreeEnsemble { trees: model.trees[..1].to_vec(), ..model.clone() };
        assert!(ndcg(&model) >= ndcg(&first));
        assert!(!model.is_empty() && model.len() <= 30);
    }

    #[test]
    fn training_is_reproducible() {
        let train = random_dataset(1, 10, 8, 3);
        let params = TrainParams { num_rounds: 15, ..TrainParams::lambdamart() };
        let a = train_lambdamart(&train, &train, &params).unwrap();
        let b = train_lambdamart(&train, &train, &params).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn concatenated_ensembles_add_scores() {
        let train = random_dataset(4, 10, 8, 3);
        let params = TrainParams { num_rounds: 12, early_stop_patience: 100, ..TrainParams::lambdamart() };
        let model = train_lambdamart(&train, &train, &params).unwrap();
        let cut = model.len() / 2;
        let head = TreeEnsemble { trees: model.trees[..cut].to_vec(), ..model.clone() };
        let tail = TreeEnsemble { trees: model.trees[cut..].to_vec(), ..model.clone() };
        for group in &train.groups {
            for inst in &group.instances {
                let x = &inst.features;
                let whole = model.score(x).unwrap();
                let parts = head.score(x).unwrap() + tail.score(x).unwrap();
                assert!((whole - parts).abs() <= 1e-12 * (1.0 + whole.abs()));
            }
        }
    }
}
