//! Least-squares regression trees grown best-first, the building block of
//! every ensemble in the crate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{TrainError, TrainParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    /// Routes `x[feature] <= threshold` to `left`. `feature` is a 0-based column.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    pub max_leaves: usize,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        RegressionTree {
            nodes: vec![Node::Leaf { value }],
            max_leaves: 1,
        }
    }

    /// Index of the leaf node `x` lands in.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// 0-based columns used by split nodes, in node order.
    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }

    pub fn set_leaf_value(&mut self, node: usize, new_value: f64) {
        if let Node::Leaf { value } = &mut self.nodes[node] {
            *value = new_value;
        }
    }

    /// Checks the structural invariants: children exist, every node is
    /// reached exactly once from the root, and the leaf budget holds.
    pub fn is_well_formed(&self) -> bool {
        let mut visited = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(at) = stack.pop() {
            if at >= self.nodes.len() || std::mem::replace(&mut visited[at], true) {
                return false;
            }
            if let Node::Split { left, right, .. } = self.nodes[at] {
                stack.push(left);
                stack.push(right);
            }
        }
        visited.iter().all(|&v| v) && self.num_leaves() <= self.max_leaves.max(1)
    }
}

/// Column-major copy of a point set with per-feature sort orders, reused
/// across every tree fitted on the same points.
pub struct TreeTrainer {
    num_points: usize,
    columns: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    /// Number of node members routed left.
    left_count: usize,
}

struct OpenLeaf {
    node: usize,
    /// Per-feature member lists, each sorted by that feature's value.
    members: Vec<Vec<u32>>,
    best: Option<SplitCandidate>,
}

impl TreeTrainer {
    pub fn new<P: AsRef<[f64]>>(points: &[P]) -> Result<Self, TrainError> {
        let num_points = points.len();
        if num_points == 0 {
            return Err(TrainError::EmptyInput);
        }
        let dim = points[0].as_ref().len();
        if let Some(bad) = points.iter().find(|p| p.as_ref().len() != dim) {
            return Err(TrainError::DimensionMismatch {
                expected: dim,
                got: bad.as_ref().len(),
            });
        }
        let columns: Vec<Vec<f64>> = (0..dim)
            .map(|f| points.iter().map(|p| p.as_ref()[f]).collect())
            .collect();
        let sorted = columns
            .par_iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..num_points as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Ok(TreeTrainer {
            num_points,
            columns,
            sorted,
        })
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// Grows a tree on `targets` and returns it with each point's leaf node.
    /// Leaves hold the weighted mean target.
    pub fn fit(
        &self,
        targets: &[f64],
        weights: &[f64],
        max_leaves: usize,
        min_instances_per_leaf: usize,
    ) -> Result<(RegressionTree, Vec<usize>), TrainError> {
        if targets.len() != self.num_points || weights.len() != self.num_points {
            return Err(TrainError::DimensionMismatch {
                expected: self.num_points,
                got: targets.len().min(weights.len()),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainError::BadWeights("weights must be finite and non-negative".into()));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(TrainError::BadWeights("all weights are zero".into()));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(TrainError::BadWeights("targets must be finite".into()));
        }
        let max_leaves = max_leaves.max(1);
        if self.dim() == 0 {
            let value = wsum(targets, weights);
            return Ok((RegressionTree::leaf(value), vec![0; self.num_points]));
        }
        let min_leaf = min_instances_per_leaf.max(1);
        let wy: Vec<f64> = targets.iter().zip(weights).map(|(t, w)| t * w).collect();
        // splits must beat float noise relative to the node's scale
        let scale: f64 = targets.iter().zip(weights).map(|(t, w)| w * t * t).sum();
        let min_gain = 1e-12 * scale.max(f64::MIN_POSITIVE);

        let mut tree = RegressionTree {
            nodes: vec![Node::Leaf { value: 0.0 }],
            max_leaves,
        };
        let mut leaf_of = vec![0usize; self.num_points];

        let mut root = OpenLeaf {
            node: 0,
            members: self.sorted.clone(),
            best: None,
        };
        root.best = self.best_split(&root.members, weights, &wy, min_leaf, min_gain);
        let mut open = vec![root];
        let mut closed: Vec<(usize, Vec<u32>)> = Vec::new();

        while open.len() + closed.len() < max_leaves {
            // pick the open leaf with the largest gain; ties keep the earliest node
            let pick = open
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.best.map(|b| (i, b.gain, l.node)))
                .fold(None, |acc: Option<(usize, f64, usize)>, cur| match acc {
                    Some(a) if a.1 > cur.1 || (a.1 == cur.1 && a.2 < cur.2) => Some(a),
                    _ => Some(cur),
                });
            let Some((pos, _, _)) = pick else { break };
            let leaf = open.swap_remove(pos);
            let split = leaf.best.expect("picked leaf has a split");

            let left_node = tree.nodes.len();
            let right_node = left_node + 1;
            tree.nodes.push(Node::Leaf { value: 0.0 });
            tree.nodes.push(Node::Leaf { value: 0.0 });
            tree.nodes[leaf.node] = Node::Split {
                feature: split.feature,
                threshold: split.threshold,
                left: left_node,
                right: right_node,
            };

            let split_col = &self.columns[split.feature];
            let goes_left = |i: u32| split_col[i as usize] <= split.threshold;
            let (left_members, right_members): (Vec<Vec<u32>>, Vec<Vec<u32>>) = leaf
                .members
                .into_par_iter()
                .map(|list| list.into_iter().partition(|&i| goes_left(i)))
                .unzip();
            debug_assert_eq!(left_members[0].len(), split.left_count);

            for (node, members) in [(left_node, left_members), (right_node, right_members)] {
                let best = self.best_split(&members, weights, &wy, min_leaf, min_gain);
                let child = OpenLeaf { node, members, best };
                if child.best.is_some() {
                    open.push(child);
                } else {
                    closed.push((node, child.members.into_iter().next().unwrap_or_default()));
                }
            }
        }

        let finished = open
            .into_iter()
            .map(|l| (l.node, l.members.into_iter().next().unwrap_or_default()))
            .chain(closed);
        for (node, members) in finished {
            let (mut sw, mut swy) = (0.0, 0.0);
            let mut members = members;
            members.sort_unstable();
            for &i in &members {
                sw += weights[i as usize];
                swy += wy[i as usize];
                leaf_of[i as usize] = node;
            }
            let value = if sw > 0.0 { swy / sw } else { 0.0 };
            tree.set_leaf_value(node, value);
        }
        Ok((tree, leaf_of))
    }

    fn best_split(
        &self,
        members: &[Vec<u32>],
        weights: &[f64],
        wy: &[f64],
        min_leaf: usize,
        min_gain: f64,
    ) -> Option<SplitCandidate> {
        let n = members.first().map_or(0, Vec::len);
        if n < 2 * min_leaf {
            return None;
        }
        let candidates: Vec<Option<SplitCandidate>> = members
            .par_iter()
            .enumerate()
            .map(|(feature, list)| self.best_split_on(feature, list, weights, wy, min_leaf))
            .collect();
        candidates
            .into_iter()
            .flatten()
            .filter(|c| c.gain > min_gain)
            .fold(None, |acc, cur| match acc {
                Some(a) if a.gain >= cur.gain => Some(a),
                _ => Some(cur),
            })
    }

    fn best_split_on(
        &self,
        feature: usize,
        list: &[u32],
        weights: &[f64],
        wy: &[f64],
        min_leaf: usize,
    ) -> Option<SplitCandidate> {
        let col = &self.columns[feature];
        let n = list.len();
        let (total_w, total_wy) = list.iter().fold((0.0, 0.0), |(w, s), &i| {
            (w + weights[i as usize], s + wy[i as usize])
        });
        if total_w <= 0.0 {
            return None;
        }
        let parent = total_wy * total_wy / total_w;
        let (mut wl, mut sl) = (0.0, 0.0);
        let mut best: Option<SplitCandidate> = None;
        for p in 0..n - 1 {
            let i = list[p] as usize;
            wl += weights[i];
            sl += wy[i];
            let left_count = p + 1;
            if left_count < min_leaf {
                continue;
            }
            if n - left_count < min_leaf {
                break;
            }
            let (lo, hi) = (col[i], col[list[p + 1] as usize]);
            if lo >= hi {
                continue;
            }
            let wr = total_w - wl;
            if wl <= 0.0 || wr <= 0.0 {
                continue;
            }
            let sr = total_wy - sl;
            let gain = sl * sl / wl + sr * sr / wr - parent;
            if best.is_none_or(|b| gain > b.gain) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(SplitCandidate {
                    gain,
                    feature,
                    threshold,
                    left_count,
                });
            }
        }
        best
    }
}

fn wsum(targets: &[f64], weights: &[f64]) -> f64 {
    let (sw, swy) = targets
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(sw, swy), (t, w)| (sw + w, swy + w * t));
    swy / sw
}

/// Fits a single least-squares regression tree with weighted-mean leaves.
pub fn fit_regression_tree<P: AsRef<[f64]>>(
    points: &[P],
    targets: &[f64],
    weights: &[f64],
    params: &TrainParams,
) -> Result<RegressionTree, TrainError> {
    let trainer = TreeTrainer::new(points)?;
    let (tree, _) = trainer.fit(targets, weights, params.max_leaves, params.min_instances_per_leaf)?;
    Ok(tree)
}
