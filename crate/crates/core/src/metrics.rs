//! Rankings and the evaluation measures: NDCG@k, Precision@k, Kendall's
//! tau and tau restricted to a top-k document set.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("cannot rank an empty score list")]
    EmptyScores,
    #[error("non-finite score {score} for document {doc}")]
    NonFiniteScore { doc: usize, score: f64 },
    #[error("empty label list")]
    EmptyLabels,
    #[error("cutoff k must be at least {min}, got {k}")]
    BadCutoff { k: usize, min: usize },
    #[error("rankings cover different document sets ({left} vs {right} documents)")]
    MismatchedDocs { left: usize, right: usize },
    #[error("kendall tau needs at least 2 documents, got {0}")]
    TooFewDocs(usize),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// A query's documents ordered best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    /// Doc ordinals, best first.
    pub ordered_docs: Vec<usize>,
    /// Scores parallel to `ordered_docs`.
    pub scores: Vec<f64>,
}

impl Ranking {
    pub fn with_query_id(mut self, query_id: impl Into<String>) -> Self {
        self.query_id = query_id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.ordered_docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered_docs.is_empty()
    }

    /// `positions()[doc]` is the 0-based rank of `doc`.
    pub fn positions(&self) -> Vec<usize> {
        let mut positions = vec![usize::MAX; self.ordered_docs.len()];
        for (pos, &doc) in self.ordered_docs.iter().enumerate() {
            positions[doc] = pos;
        }
        positions
    }

    /// Reorders per-document values (indexed by doc ordinal) into rank order.
    pub fn in_rank_order<T: Copy>(&self, by_doc: &[T]) -> Vec<T> {
        self.ordered_docs.iter().map(|&d| by_doc[d]).collect()
    }

    pub fn reversed(&self) -> Ranking {
        Ranking {
            query_id: self.query_id.clone(),
            ordered_docs: self.ordered_docs.iter().rev().copied().collect(),
            scores: self.scores.iter().rev().map(|s| -s).collect(),
        }
    }
}

/// Sorts documents by descending score; exact ties go to the lower ordinal.
pub fn rank_by_scores(scores: &[f64]) -> Result<Ranking> {
    if scores.is_empty() {
        return Err(MetricError::EmptyScores);
    }
    if let Some((doc, &score)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore { doc, score });
    }
    let mut ordered_docs: Vec<usize> = (0..scores.len()).collect();
    ordered_docs.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let scores = ordered_docs.iter().map(|&d| scores[d]).collect();
    Ok(Ranking {
        query_id: String::new(),
        ordered_docs,
        scores,
    })
}

/// Graded gain `2^label - 1`.
#[inline]
pub fn gain(label: u8) -> f64 {
    (1u64 << label.min(62)) as f64 - 1.0
}

/// Discount for a 0-based rank position: `1 / log2(pos + 2)`.
#[inline]
pub fn discount(position: usize) -> f64 {
    1.0 / ((position + 2) as f64).log2()
}

/// DCG over the first `min(k, n)` labels, given in rank order.
pub fn dcg_at_k(labels_in_rank_order: &[u8], k: usize) -> f64 {
    labels_in_rank_order
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, &l)| gain(l) * discount(pos))
        .sum()
}

/// DCG of the label multiset sorted descending.
pub fn ideal_dcg_at_k(labels: &[u8], k: usize) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    dcg_at_k(&sorted, k)
}

/// NDCG@k; queries whose ideal DCG is zero score 0.
pub fn ndcg_at_k(labels_in_rank_order: &[u8], k: usize) -> Result<f64> {
    if labels_in_rank_order.is_empty() {
        return Err(MetricError::EmptyLabels);
    }
    if k == 0 {
        return Err(MetricError::BadCutoff { k, min: 1 });
    }
    let ideal = ideal_dcg_at_k(labels_in_rank_order, k);
    if ideal == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg_at_k(labels_in_rank_order, k) / ideal)
}

/// Fraction of the top `k` slots holding a label `>= relevance_threshold`.
/// The divisor is `k` even for lists shorter than `k`.
pub fn precision_at_k(labels_in_rank_order: &[u8], k: usize, relevance_threshold: u8) -> Result<f64> {
    if labels_in_rank_order.is_empty() {
        return Err(MetricError::EmptyLabels);
    }
    if k == 0 {
        return Err(MetricError::BadCutoff { k, min: 1 });
    }
    let hits = labels_in_rank_order
        .iter()
        .take(k)
        .filter(|&&l| l >= relevance_threshold)
        .count();
    Ok(hits as f64 / k as f64)
}

fn check_same_docs(a: &Ranking, b: &Ranking) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricError::MismatchedDocs {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    let mut seen = vec![false; n];
    for &d in &a.ordered_docs {
        if d >= n || std::mem::replace(&mut seen[d], true) {
            return Err(MetricError::MismatchedDocs { left: n, right: n });
        }
    }
    let mut seen = vec![false; n];
    for &d in &b.ordered_docs {
        if d >= n || std::mem::replace(&mut seen[d], true) {
            return Err(MetricError::MismatchedDocs { left: n, right: n });
        }
    }
    Ok(())
}

/// Counts inversions in `seq` by merge sort.
fn count_inversions(seq: &mut [usize], scratch: &mut [usize]) -> u64 {
    let n = seq.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inversions = {
        let (left, right) = seq.split_at_mut(mid);
        let (sl, sr) = scratch.split_at_mut(mid);
        count_inversions(left, sl) + count_inversions(right, sr)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if seq[i] <= seq[j] {
            scratch[k] = seq[i];
            i += 1;
        } else {
            scratch[k] = seq[j];
            inversions += (mid - i) as u64;
            j += 1;
        }
        k += 1;
    }
    scratch[k..k + mid - i].copy_from_slice(&seq[i..mid]);
    k += mid - i;
    scratch[k..k + n - j].copy_from_slice(&seq[j..n]);
    seq.copy_from_slice(&scratch[..n]);
    inversions
}

/// Tau-a from integer pair counts.
#[inline]
pub fn tau_from_counts(concordant: u64, discordant: u64, n: usize) -> f64 {
    let pairs = (n as u64) * (n as u64 - 1) / 2;
    (concordant as i64 - discordant as i64) as f64 / pairs as f64
}

/// Tau over the documents of `subset`, using each ranking's positions.
fn tau_over(subset_in_a_order: &[usize], positions_b: &[usize]) -> f64 {
    let n = subset_in_a_order.len();
    let mut seq: Vec<usize> = subset_in_a_order.iter().map(|&d| positions_b[d]).collect();
    let mut scratch = vec![0; n];
    let discordant = count_inversions(&mut seq, &mut scratch);
    let total = (n as u64) * (n as u64 - 1) / 2;
    tau_from_counts(total - discordant, discordant, n)
}

/// Kendall's tau-a between two rankings of the same documents.
///
/// Discordant pairs are counted as inversions of `b`'s positions taken in
/// `a`'s order, which is exact in integer arithmetic.
pub fn kendall_tau(rank_a: &Ranking, rank_b: &Ranking) -> Result<f64> {
    check_same_docs(rank_a, rank_b)?;
    if rank_a.len() < 2 {
        return Err(MetricError::TooFewDocs(rank_a.len()));
    }
    Ok(tau_over(&rank_a.ordered_docs, &rank_b.positions()))
}

/// Which documents tau@k compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopKSet {
    /// The first ranking's (the base ranker's) top-k documents.
    #[default]
    BaseTopK,
    /// Documents in both rankings' top-k.
    Intersection,
}

/// Kendall's tau restricted to pairs within a top-k document set.
///
/// `rank_a` is the reference (base ranker) ranking. Members of the set are
/// ordered in each ranking by their full-list positions.
pub fn kendall_tau_at_k(rank_a: &Ranking, rank_b: &Ranking, k: usize, set: TopKSet) -> Result<f64> {
    check_same_docs(rank_a, rank_b)?;
    if k < 2 {
        return Err(MetricError::BadCutoff { k, min: 2 });
    }
    let positions_b = rank_b.positions();
    let top_a = &rank_a.ordered_docs[..k.min(rank_a.len())];
    let members: Vec<usize> = match set {
        TopKSet::BaseTopK => top_a.to_vec(),
        TopKSet::Intersection => top_a.iter().copied().filter(|&d| positions_b[d] < k).collect(),
    };
    if members.len() < 2 {
        return Err(MetricError::TooFewDocs(members.len()));
    }
    Ok(tau_over(&members, &positions_b))
}

/// Macro-averaged metrics over a set of queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub k: usize,
    pub ndcg_at_k: f64,
    pub precision_at_k: f64,
    /// `None` when no query supported a tau comparison.
    pub tau: Option<f64>,
    pub tau_at_k: Option<f64>,
}

/// Equal-weight mean, or `None` for an empty sequence.
pub fn mean<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let (sum, count) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranking(order: &[usize]) -> Ranking {
        Ranking {
            query_id: "q".into(),
            ordered_docs: order.to_vec(),
            scores: (0..order.len()).rev().map(|s| s as f64).collect(),
        }
    }

    /// Enumerates every unordered doc pair and compares orientations.
    fn brute_force_tau(a: &Ranking, b: &Ranking) -> f64 {
        let n = a.len();
        let pos = |r: &Ranking, doc: usize| r.ordered_docs.iter().position(|&d| d == doc).unwrap();
        let (mut c, mut d) = (0u64, 0u64);
        for x in 0..n {
            for y in x + 1..n {
                let sa = pos(a, x) < pos(a, y);
                let sb = pos(b, x) < pos(b, y);
                if sa == sb {
                    c += 1
                } else {
                    d += 1
                }
            }
        }
        tau_from_counts(c, d, n)
    }

    #[test]
    fn ranks_descending_with_ordinal_tie_break() {
        assert_eq!(rank_by_scores(&[0.1, 0.9, 0.5]).unwrap().ordered_docs, vec![1, 2, 0]);
        assert_eq!(rank_by_scores(&[0.5, 0.5]).unwrap().ordered_docs, vec![0, 1]);
        assert_eq!(rank_by_scores(&[0.0, -0.0]).unwrap().ordered_docs, vec![0, 1]);
        assert_eq!(rank_by_scores(&[0.1, 0.9, 0.5]).unwrap().scores, vec![0.9, 0.5, 0.1]);
        assert!(matches!(
            rank_by_scores(&[1.0, f64::NAN]),
            Err(MetricError::NonFiniteScore { doc: 1, .. })
        ));
        assert!(rank_by_scores(&[f64::INFINITY]).is_err());
        assert_eq!(rank_by_scores(&[]), Err(MetricError::EmptyScores));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[4, 3, 2, 1, 0], 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[0, 0, 0], 3).unwrap(), 0.0);
        // 15 / log2(3) over 15 / log2(2)
        let expected = 1.0 / 3f64.log2();
        assert!((ndcg_at_k(&[0, 4], 2).unwrap() - 0.6309).abs() < 1e-4);
        assert!((ndcg_at_k(&[0, 4], 2).unwrap() - expected).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[], 2), Err(MetricError::EmptyLabels));
        assert!(ndcg_at_k(&[1], 0).is_err());
    }

    #[test]
    fn ndcg_only_sees_top_k() {
        // the label-4 doc falls outside k=1, so DCG@1 is 0 while IDCG@1 is 15
        assert_eq!(ndcg_at_k(&[0, 4], 1).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&[2, 0, 4], 10).unwrap(), ndcg_at_k(&[2, 0, 4], 3).unwrap());
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[4, 0, 3, 0, 0, 0, 0, 0, 0, 0], 10, 1).unwrap(), 0.2);
        assert_eq!(precision_at_k(&[1, 2, 3, 4, 1], 5, 1).unwrap(), 1.0);
        assert_eq!(precision_at_k(&[4, 4], 10, 1).unwrap(), 0.2);
        assert_eq!(precision_at_k(&[4, 1, 0], 3, 2).unwrap(), 1.0 / 3.0);
        assert!(precision_at_k(&[], 10, 1).is_err());
    }

    #[test]
    fn tau_examples() {
        let a = ranking(&[0, 1, 2, 3, 4]);
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        let b = ranking(&[0, 1, 2, 3]);
        assert_eq!(kendall_tau(&b, &b.reversed()).unwrap(), -1.0);
        let swapped = ranking(&[1, 0, 2, 3]);
        assert!((kendall_tau(&b, &swapped).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(kendall_tau(&b, &swapped).unwrap(), brute_force_tau(&b, &swapped));
    }

    #[test]
    fn tau_errors() {
        let one = ranking(&[0]);
        assert_eq!(kendall_tau(&one, &one), Err(MetricError::TooFewDocs(1)));
        assert!(kendall_tau(&ranking(&[0, 1]), &ranking(&[0, 1, 2])).is_err());
        assert!(kendall_tau(&ranking(&[0, 0]), &ranking(&[0, 1])).is_err());
    }

    #[test]
    fn tau_at_k_examples() {
        let a = ranking(&[0, 1, 2, 3, 4, 5]);
        for k in 2..8 {
            assert_eq!(kendall_tau_at_k(&a, &a, k, TopKSet::BaseTopK).unwrap(), 1.0);
        }
        let head_reversed = ranking(&[3, 2, 1, 0, 4, 5]);
        assert_eq!(kendall_tau_at_k(&a, &head_reversed, 4, TopKSet::BaseTopK).unwrap(), -1.0);
        let tail_reversed = ranking(&[0, 1, 2, 5, 4, 3]);
        assert_eq!(kendall_tau_at_k(&a, &tail_reversed, 3, TopKSet::BaseTopK).unwrap(), 1.0);
        assert!(kendall_tau(&a, &tail_reversed).unwrap() < 1.0);
        assert!(kendall_tau_at_k(&a, &a, 1, TopKSet::BaseTopK).is_err());
    }

    #[test]
    fn tau_at_k_uses_full_list_positions_of_b() {
        // b pushes doc 0 below docs 1 and 2's followers; within S = {0,1,2}
        // b orders 1, 2, 0: pairs (0,1) and (0,2) discordant, (1,2) concordant
        let a = ranking(&[0, 1, 2, 3, 4]);
        let b = ranking(&[1, 3, 2, 4, 0]);
        let expected = (1.0 - 2.0) / 3.0;
        assert!((kendall_tau_at_k(&a, &b, 3, TopKSet::BaseTopK).unwrap() - expected).abs() < 1e-15);
        // intersection of top-3 sets is {1, 2}, concordant
        assert_eq!(kendall_tau_at_k(&a, &b, 3, TopKSet::Intersection).unwrap(), 1.0);
        let c = ranking(&[4, 3, 2, 1, 0]);
        assert_eq!(
            kendall_tau_at_k(&a, &c, 2, TopKSet::Intersection),
            Err(MetricError::TooFewDocs(0))
        );
    }

    fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
        Just((0..n).collect::<Vec<_>>()).prop_shuffle()
    }

    fn permutation_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2usize..=64).prop_flat_map(|n| (permutation(n), permutation(n)))
    }

    proptest! {
        #[test]
        fn tau_matches_brute_force((a, b) in permutation_pair()) {
            let (a, b) = (ranking(&a), ranking(&b));
            prop_assert_eq!(kendall_tau(&a, &b).unwrap(), brute_force_tau(&a, &b));
        }

        #[test]
        fn tau_is_symmetric_and_bounded((a, b) in permutation_pair()) {
            let (a, b) = (ranking(&a), ranking(&b));
            let t = kendall_tau(&a, &b).unwrap();
            prop_assert_eq!(t, kendall_tau(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&t));
            prop_assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(kendall_tau(&a, &a.reversed()).unwrap(), -1.0);
        }

        #[test]
        fn ndcg_bounded_and_tie_invariant(
            labels in proptest::collection::vec(0u8..=4, 1..40),
            k in 1usize..20,
        ) {
            let v = ndcg_at_k(&labels, k).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            let mut ideal = labels.clone();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let ideal_v = ndcg_at_k(&ideal, k).unwrap();
            prop_assert!(ideal_v == 1.0 || ideal_v == 0.0);
            // swapping two equal labels leaves the sequence, hence NDCG, unchanged
            let mut permuted = labels.clone();
            if let Some(j) = (1..permuted.len()).find(|&j| permuted[j] == permuted[0]) {
                permuted.swap(0, j);
            }
            prop_assert_eq!(ndcg_at_k(&permuted, k).unwrap(), v);
        }

        #[test]
        fn precision_ignores_order_within_top_k(
            labels in proptest::collection::vec(0u8..=4, 1..40),
            k in 1usize..20,
            threshold in 1u8..=4,
        ) {
            let p = precision_at_k(&labels, k, threshold).unwrap();
            let mut shuffled = labels.clone();
            let top = k.min(shuffled.len());
            shuffled[..top].reverse();
            prop_assert_eq!(precision_at_k(&shuffled, k, threshold).unwrap(), p);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn ranking_is_affine_invariant(
            scores in proptest::collection::vec(-1000i32..1000, 1..50),
            scale in 1i32..100,
            shift in -1000i32..1000,
        ) {
            // integer-valued inputs keep the transform exact
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let t: Vec<f64> = scores.iter().map(|&v| (scale * v + shift) as f64).collect();
            prop_assert_eq!(
                rank_by_scores(&s).unwrap().ordered_docs,
                rank_by_scores(&t).unwrap().ordered_docs
            );
        }
    }
}
