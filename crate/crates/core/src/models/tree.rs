//! Regression trees shared by the forest and the boosted ensemble.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::stable_mean;
use super::TabularDataset;

/// Samples with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right, .. } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaf_values(&self, out: &mut Vec<f64>) {
        match self {
            Node::Leaf { value } => out.push(*value),
            Node::Split { left, right, .. } => {
                left.leaf_values(out);
                right.leaf_values(out);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Criterion {
    /// Squared-error reduction; leaves hold the target mean.
    Variance,
    /// Second-order boosting objective on gradients with unit hessians.
    Regularized { alpha: f64, lambda: f64 },
}

pub fn soft_threshold(g: f64, a: f64) -> f64 {
    g.signum() * (g.abs() - a).max(0.0)
}

impl Criterion {
    fn score(self, sum: f64, count: f64) -> f64 {
        match self {
            Criterion::Variance => sum * sum / count,
            Criterion::Regularized { alpha, lambda } => {
                let s = soft_threshold(sum, alpha);
                s * s / (count + lambda)
            }
        }
    }

    fn gain(self, left: (f64, f64), right: (f64, f64), parent: (f64, f64)) -> f64 {
        let raw = self.score(left.0, left.1) + self.score(right.0, right.1) - self.score(parent.0, parent.1);
        match self {
            Criterion::Variance => raw,
            Criterion::Regularized { .. } => 0.5 * raw,
        }
    }

    fn leaf(self, targets: impl Iterator<Item = f64>) -> f64 {
        match self {
            Criterion::Variance => stable_mean(targets),
            Criterion::Regularized { alpha, lambda } => {
                let (mut g, mut n) = (0.0, 0.0);
                for t in targets {
                    g += t;
                    n += 1.0;
                }
                -soft_threshold(g, alpha) / (n + lambda)
            }
        }
    }
}

/// Greedy depth-first builder. `idx` may repeat samples (bootstrap).
pub(crate) struct TreeBuilder<'a> {
    pub data: &'a TabularDataset,
    pub targets: &'a [f64],
    pub criterion: Criterion,
    pub max_depth: usize,
    pub max_features: Option<usize>,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Summed split gain per feature.
    pub importance: Vec<f64>,
}

pub const TIE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BestSplit {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    /// Samples going left once `idx` is sorted by the feature.
    pub n_left: usize,
}

impl<'a> TreeBuilder<'a> {
    pub fn new(data: &'a TabularDataset, targets: &'a [f64], criterion: Criterion, max_depth: usize) -> Self {
        Self {
            data,
            targets,
            criterion,
            max_depth,
            max_features: None,
            rng: None,
            importance: vec![0.0; data.n_features()],
        }
    }

    pub fn build(&mut self, idx: &mut [usize]) -> Node {
        self.grow(idx, 0)
    }

    fn leaf(&self, idx: &[usize]) -> Node {
        Node::Leaf { value: self.criterion.leaf(idx.iter().map(|&i| self.targets[i])) }
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> Node {
        if depth >= self.max_depth || idx.len() < 2 {
            return self.leaf(idx);
        }
        let Some(best) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        let f = best.feature;
        let data = self.data;
        idx.sort_by(|&a, &b| data.row(a)[f].total_cmp(&data.row(b)[f]));
        self.importance[f] += best.gain;
        let (l, r) = idx.split_at_mut(best.n_left);
        let left = Box::new(self.grow(l, depth + 1));
        let right = Box::new(self.grow(r, depth + 1));
        Node::Split { feature: f, threshold: best.threshold, gain: best.gain, left, right }
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let p = self.data.n_features();
        match (self.max_features, self.rng.as_deref_mut()) {
            (Some(k), Some(rng)) if k < p => {
                let mut v = index::sample(rng, p, k.max(1)).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..p).collect(),
        }
    }

    /// Highest-gain split; ties keep the lowest feature, then the lowest
    /// threshold. Gains within a relative `TIE_TOLERANCE` count as ties, since
    /// the same partition reached through different features sums its targets
    /// in a different order. Only strictly positive gains qualify.
    pub fn best_split(&mut self, idx: &[usize]) -> Option<BestSplit> {
        let shift = match self.criterion {
            Criterion::Variance => self.targets[idx[0]],
            Criterion::Regularized { .. } => 0.0,
        };
        let n = idx.len() as f64;
        let total: f64 = idx.iter().map(|&i| self.targets[i] - shift).sum();
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<usize> = idx.to_vec();
        for f in self.candidate_features() {
            let data = self.data;
            order.sort_by(|&a, &b| data.row(a)[f].total_cmp(&data.row(b)[f]));
            let mut left_sum = 0.0;
            for k in 0..order.len() - 1 {
                left_sum += self.targets[order[k]] - shift;
                let (xa, xb) = (data.row(order[k])[f], data.row(order[k + 1])[f]);
                if xa == xb {
                    continue;
                }
                let nl = (k + 1) as f64;
                let gain = self.criterion.gain((left_sum, nl), (total - left_sum, n - nl), (total, n));
                if best.map_or(gain > 0.0, |b| gain > b.gain * (1.0 + TIE_TOLERANCE)) {
                    let mid = 0.5 * (xa + xb);
                    let threshold = if mid < xb { mid } else { xa };
                    best = Some(BestSplit { feature: f, threshold, gain, n_left: k + 1 });
                }
            }
        }
        best
    }
}
