//! Isolation Forest with the usual `2^(-E[h(x)] / c(psi))` anomaly score.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    pub subsample: usize,
    pub trees: Vec<Node>,
}

/// Exact harmonic number `H(i) = 1 + 1/2 + ... + 1/i`.
pub fn harmonic(i: usize) -> f64 {
    (1..=i).map(|k| 1.0 / k as f64).sum()
}

/// Average path length of an unsuccessful BST search over `n` keys:
/// `c(n) = 2 H(n-1) - 2 (n-1) / n`, with `c(1) = 0`.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        _ => 2.0 * harmonic(n - 1) - 2.0 * (n as f64 - 1.0) / n as f64,
    }
}

fn build<R: Rng>(rng: &mut R, points: &[&[f64]], depth: usize, limit: usize) -> Node {
    if depth >= limit || points.len() <= 1 {
        return Node::Leaf { size: points.len() };
    }
    let dims = points[0].len();
    // Only split on features that still vary.
    let spans: Vec<(usize, f64, f64)> = (0..dims)
        .filter_map(|f| {
            let (lo, hi) = points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[f]), hi.max(p[f])));
            (hi > lo).then_some((f, lo, hi))
        })
        .collect();
    if spans.is_empty() {
        return Node::Leaf { size: points.len() };
    }
    let (feature, lo, hi) = spans[rng.random_range(0..spans.len())];
    let value = rng.random_range(lo..hi);
    let (l, r): (Vec<&[f64]>, Vec<&[f64]>) = points.iter().partition(|p| p[feature] < value);
    Node::Split {
        feature,
        value,
        left: Box::new(build(rng, &l, depth + 1, limit)),
        right: Box::new(build(rng, &r, depth + 1, limit)),
    }
}

fn path_length(node: &Node, x: &[f64], depth: usize) -> f64 {
    match node {
        Node::Leaf { size } => depth as f64 + average_path_length(*size),
        Node::Split {
            feature,
            value,
            left,
            right,
        } => {
            if x[*feature] < *value {
                path_length(left, x, depth + 1)
            } else {
                path_length(right, x, depth + 1)
            }
        }
    }
}

impl IsolationForest {
    pub fn fit(points: &[Vec<f64>], n_trees: usize, max_subsample: usize, seed: u64) -> Self {
        let psi = max_subsample.min(points.len()).max(1);
        let limit = (psi as f64).log2().ceil() as usize;
        let trees = (0..n_trees)
            .map(|t| {
                let mut rng = stream(seed, "iforest/tree", t as u64);
                let idx = sample(&mut rng, points.len(), psi);
                let sub: Vec<&[f64]> = idx.iter().map(|i| points[i].as_slice()).collect();
                build(&mut rng, &sub, 0, limit.max(1))
            })
            .collect();
        Self { subsample: psi, trees }
    }

    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| path_length(t, x, 0)).sum::<f64>() / self.trees.len() as f64
    }

    /// Anomaly score in (0, 1); larger is more anomalous.
    pub fn score(&self, x: &[f64]) -> f64 {
        let c = average_path_length(self.subsample).max(f64::MIN_POSITIVE);
        2f64.powf(-self.mean_path_length(x) / c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean isolation depth of `n` distinct 1-D points, enumerating every
    /// tree obtained by splitting at a uniformly chosen gap.
    fn exhaustive_mean_depth(n: usize) -> f64 {
        fn total_depth(n: usize) -> f64 {
            if n <= 1 {
                return 0.0;
            }
            let trees: f64 = (1..n).map(|k| total_depth(k) + total_depth(n - k)).sum();
            n as f64 + trees / (n - 1) as f64
        }
        total_depth(n) / n as f64
    }

    #[test]
    fn normalization_matches_exhaustive_trees() {
        for n in 2..=8 {
            let c = average_path_length(n);
            let brute = exhaustive_mean_depth(n);
            assert!((c - brute).abs() < 1e-12, "n={n}: {c} vs {brute}");
        }
    }

    #[test]
    fn small_cases() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
    }
}
