use log::{debug, warn};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lambdamart::softplus_neg;
use super::{FlatQueries, Result, Scorer, TrainError, TrainParams};
use crate::data::Dataset;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A `[D, H, 1]` feed-forward scorer with sigmoid hidden units and a
/// linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseNet {
    pub input_dim: usize,
    pub hidden_size: usize,
    /// `H x D`, row-major.
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
}

impl PairwiseNet {
    /// Uniform initialization in `±1/sqrt(fan_in)` per layer.
    pub fn init(input_dim: usize, hidden_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r1 = 1.0 / (input_dim.max(1) as f64).sqrt();
        let r2 = 1.0 / (hidden_size.max(1) as f64).sqrt();
        let mut draw = |r: f64, n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-r..=r)).collect() };
        let hidden_weights = draw(r1, hidden_size * input_dim);
        let hidden_bias = draw(r1, hidden_size);
        let output_weights = draw(r2, hidden_size);
        let output_bias = draw(r2, 1)[0];
        PairwiseNet {
            input_dim,
            hidden_size,
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
        }
    }

    pub fn num_params(&self) -> usize {
        self.hidden_weights.len() + self.hidden_bias.len() + self.output_weights.len() + 1
    }

    /// All parameters in a fixed order: hidden weights, hidden bias,
    /// output weights, output bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        flat.extend_from_slice(&self.hidden_weights);
        flat.extend_from_slice(&self.hidden_bias);
        flat.extend_from_slice(&self.output_weights);
        flat.push(self.output_bias);
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "parameter count");
        let (hw, rest) = flat.split_at(self.hidden_weights.len());
        let (hb, rest) = rest.split_at(self.hidden_bias.len());
        let (ow, ob) = rest.split_at(self.output_weights.len());
        self.hidden_weights.copy_from_slice(hw);
        self.hidden_bias.copy_from_slice(hb);
        self.output_weights.copy_from_slice(ow);
        self.output_bias = ob[0];
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden_size)
            .map(|h| {
                let row = &self.hidden_weights[h * self.input_dim..(h + 1) * self.input_dim];
                let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.hidden_bias[h];
                sigmoid(z)
            })
            .collect()
    }

    fn output(&self, hidden: &[f64]) -> f64 {
        hidden
            .iter()
            .zip(&self.output_weights)
            .map(|(a, w)| a * w)
            .sum::<f64>()
            + self.output_bias
    }

    /// Adds `coeff * d score(x) / d params` into `grad` (flat layout).
    fn accumulate_score_gradient(&self, x: &[f64], hidden: &[f64], coeff: f64, grad: &mut [f64]) {
        let (d, h_n) = (self.input_dim, self.hidden_size);
        let hb_off = h_n * d;
        let ow_off = hb_off + h_n;
        for h in 0..h_n {
            let a = hidden[h];
            grad[ow_off + h] += coeff * a;
            let back = coeff * self.output_weights[h] * a * (1.0 - a);
            grad[hb_off + h] += back;
            let row = &mut grad[h * d..(h + 1) * d];
            for (g, v) in row.iter_mut().zip(x) {
                *g += back * v;
            }
        }
        grad[ow_off + h_n] += coeff;
    }

    /// Pair loss `ln(1 + exp(-sigma (s(x_hi) - s(x_lo))))` where `x_hi`
    /// should rank above `x_lo`.
    pub fn pair_loss(&self, x_hi: &[f64], x_lo: &[f64], sigma: f64) -> f64 {
        softplus_neg(sigma * (self.score_unchecked(x_hi) - self.score_unchecked(x_lo)))
    }

    /// Analytic gradient of [`pair_loss`](Self::pair_loss), flat layout.
    pub fn pair_loss_gradient(&self, x_hi: &[f64], x_lo: &[f64], sigma: f64) -> Vec<f64> {
        let (h_hi, h_lo) = (self.hidden(x_hi), self.hidden(x_lo));
        let diff = self.output(&h_hi) - self.output(&h_lo);
        let rho = 1.0 / (1.0 + (sigma * diff).exp());
        let mut grad = vec![0.0; self.num_params()];
        self.accumulate_score_gradient(x_hi, &h_hi, -sigma * rho, &mut grad);
        self.accumulate_score_gradient(x_lo, &h_lo, sigma * rho, &mut grad);
        grad
    }

    /// Loss and gradient summed over `pairs` (indices into `rows`), using
    /// one forward pass per document.
    pub fn batch_loss_gradient(&self, rows: &[&[f64]], pairs: &[(usize, usize)], sigma: f64) -> (f64, Vec<f64>) {
        let hidden: Vec<Vec<f64>> = rows.iter().map(|x| self.hidden(x)).collect();
        let scores: Vec<f64> = hidden.iter().map(|h| self.output(h)).collect();
        let mut coeff = vec![0.0; rows.len()];
        let mut loss = 0.0;
        for &(hi, lo) in pairs {
            let diff = scores[hi] - scores[lo];
            loss += softplus_neg(sigma * diff);
            let rho = 1.0 / (1.0 + (sigma * diff).exp());
            coeff[hi] -= sigma * rho;
            coeff[lo] += sigma * rho;
        }
        let mut grad = vec![0.0; self.num_params()];
        for (doc, &c) in coeff.iter().enumerate() {
            if c != 0.0 {
                self.accumulate_score_gradient(rows[doc], &hidden[doc], c, &mut grad);
            }
        }
        (loss, grad)
    }
}

impl Scorer for PairwiseNet {
    fn feature_dim(&self) -> usize {
        self.input_dim
    }

    fn score_unchecked(&self, features: &[f64]) -> f64 {
        self.output(&self.hidden(features))
    }
}

/// All `(i, j)` with `label_i > label_j`, local to one query.
fn discordant_pairs(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] > labels[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Trains RankNet by per-query mini-batch gradient descent on the pairwise
/// logistic loss, keeping the epoch with the best validation NDCG
/// (training NDCG when the validation set is empty). Epoch 0 is the
/// initialization.
pub fn train_ranknet(train: &Dataset, validation: &Dataset, params: &TrainParams) -> Result<PairwiseNet> {
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
    let mut usable: Vec<usize> = (0..flat.ranges.len()).filter(|&q| flat.is_trainable(q)).collect();
    if usable.is_empty() {
        return Err(TrainError::NoUsableQueries);
    }
    let skipped = flat.ranges.len() - usable.len();
    if skipped > 0 {
        warn!("skipping {skipped} training queries without two distinct labels");
    }
    let query_pairs: Vec<Vec<(usize, usize)>> = flat
        .ranges
        .iter()
        .map(|r| discordant_pairs(&flat.labels[r.clone()]))
        .collect();
    let vflat = FlatQueries::new(validation);
    let eval = |net: &PairwiseNet| -> Result<f64> {
        let (rows, target) = if vflat.ranges.is_empty() { (&flat.rows, &flat) } else { (&vflat.rows, &vflat) };
        let scores: Vec<f64> = rows.iter().map(|x| net.score_unchecked(x)).collect();
        target.mean_ndcg(&scores, params.ndcg_cutoff)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut net = PairwiseNet::init(train.feature_dim, params.hidden_size, rng.gen());
    let mut best = net.clone();
    let mut best_metric = eval(&net)?;
    let mut best_epoch = 0;

    for epoch in 1..=params.num_rounds {
        usable.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &q in &usable {
            let range = flat.ranges[q].clone();
            let all = &query_pairs[q];
            let sampled: Vec<(usize, usize)> = if all.len() <= params.max_pairs_per_query {
                all.clone()
            } else {
                index::sample(&mut rng, all.len(), params.max_pairs_per_query)
                    .into_iter()
                    .map(|i| all[i])
                    .collect()
            };
            let (loss, grad) = net.batch_loss_gradient(&flat.rows[range], &sampled, params.sigma);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            epoch_loss += loss;
            let mut theta = net.to_flat();
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= params.learning_rate * g;
            }
            if theta.iter().any(|t| !t.is_finite()) {
                return Err(TrainError::Diverged { epoch });
            }
            net.set_flat(&theta);
        }
        let metric = eval(&net)?;
        debug!("epoch {epoch}: loss {epoch_loss:.6}, ndcg@{} = {metric:.6}", params.ndcg_cutoff);
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best = net.clone();
        } else if epoch - best_epoch >= params.early_stop_patience {
            break;
        }
    }
    Ok(best)
}
