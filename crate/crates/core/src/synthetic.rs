//! Seeded synthetic ranking data with a known generating function.
//!
//! Each document's utility is a weighted sum of the first
//! `generating_features` features plus uniform noise; the
//! remaining features are pure noise. Labels grade the within-query rank
//! of the utility: top 5% -> 4, next 10% -> 3, next 15% -> 2, next 20% -> 1,
//! the rest 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSubset, QueryDocumentInstance, QueryGroup, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub queries: usize,
    pub docs_per_query: usize,
    pub features: usize,
    pub generating_features: usize,
    /// Half-width of the uniform noise added to each utility.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            queries: 1000,
            docs_per_query: 50,
            features: 30,
            generating_features: 10,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// Cumulative rank fractions at which the grade drops by one.
const GRADE_CUTS: [f64; 4] = [0.05, 0.15, 0.30, 0.50];

fn grade(position: usize, n: usize) -> u8 {
    let frac = position as f64 / n as f64;
    let below = GRADE_CUTS.iter().filter(|&&c| frac >= c).count();
    4 - below as u8
}

impl SyntheticSpec {
    /// The generating function's weights, one per generating feature.
    pub fn weights(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x005e_ed0f_7e16);
        (0..self.generating_features).map(|_| rng.gen_range(0.5..1.5)).collect()
    }

    /// Noise-free utility of a feature vector.
    pub fn utility(&self, features: &[f64]) -> f64 {
        self.weights().iter().zip(features).map(|(w, x)| w * x).sum()
    }

    /// The interpretable subset used in tests: the first half of the
    /// generating features plus every noise feature.
    pub fn half_generating_subset(&self) -> Result<FeatureSubset> {
        let kept = 1..=self.generating_features / 2;
        let noise = self.generating_features + 1..=self.features;
        FeatureSubset::new(kept.chain(noise))
    }

    pub fn generate(&self) -> Dataset {
        assert!(self.generating_features <= self.features, "generating features exceed dimension");
        let weights = self.weights();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.docs_per_query;
        let groups = (0..self.queries)
            .map(|q| {
                let query_id = (q + 1).to_string();
                let docs: Vec<(Vec<f64>, f64)> = (0..n)
                    .map(|_| {
                        let x: Vec<f64> = (0..self.features).map(|_| rng.gen::<f64>()).collect();
                        let u: f64 = weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>()
                            + self.noise * rng.gen_range(-1.0..=1.0);
                        (x, u)
                    })
                    .collect();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| docs[b].1.total_cmp(&docs[a].1).then(a.cmp(&b)));
                let mut labels = vec![0u8; n];
                for (position, &doc) in order.iter().enumerate() {
                    labels[doc] = grade(position, n);
                }
                let instances = docs
                    .into_iter()
                    .enumerate()
                    .map(|(ordinal, (features, _))| QueryDocumentInstance {
                        query_id: query_id.clone(),
                        doc_ordinal: ordinal,
                        label: labels[ordinal],
                        features,
                    })
                    .collect();
                QueryGroup { query_id, instances }
            })
            .collect();
        Dataset {
            groups,
            feature_dim: self.features,
        }
    }
}
