//! Isolation Forest: random axis-aligned splits isolate anomalies in fewer steps.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Node {
    Leaf { size: usize },
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

pub struct IsolationForest {
    trees: Vec<Node>,
    sample_size: usize,
}

/// Average path length of an unsuccessful search in a binary search tree of `n` nodes.
pub(crate) fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            let harmonic = (n - 1.0).ln() + 0.577_215_664_901_532_9;
            2.0 * harmonic - 2.0 * (n - 1.0) / n
        }
    }
}

fn range(data: &[&[f64]], idx: &[usize], feature: usize) -> (f64, f64) {
    idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        let v = data[i][feature];
        (lo.min(v), hi.max(v))
    })
}

fn build<R: Rng>(data: &[&[f64]], idx: &mut [usize], depth: usize, limit: usize, rng: &mut R) -> Node {
    if depth >= limit || idx.len() <= 1 {
        return Node::Leaf { size: idx.len() };
    }
    let dim = data[idx[0]].len();
    // Rejection sampling keeps the feature choice uniform over non-constant
    // features; after a few misses enumerate them instead.
    let mut chosen = None;
    for _ in 0..16 {
        let f = rng.random_range(0..dim);
        let (lo, hi) = range(data, idx, f);
        if hi > lo {
            chosen = Some((f, lo, hi));
            break;
        }
    }
    if chosen.is_none() {
        let candidates: Vec<(usize, f64, f64)> = (0..dim)
            .map(|f| {
                let (lo, hi) = range(data, idx, f);
                (f, lo, hi)
            })
            .filter(|&(_, lo, hi)| hi > lo)
            .collect();
        if candidates.is_empty() {
            return Node::Leaf { size: idx.len() };
        }
        chosen = Some(candidates[rng.random_range(0..candidates.len())]);
    }
    let (feature, lo, hi) = chosen.expect("set above");
    let threshold = rng.random_range(lo..hi);
    let mut split = 0;
    for k in 0..idx.len() {
        if data[idx[k]][feature] < threshold {
            idx.swap(k, split);
            split += 1;
        }
    }
    let (left, right) = idx.split_at_mut(split);
    Node::Split {
        feature,
        threshold,
        left: Box::new(build(data, left, depth + 1, limit, rng)),
        right: Box::new(build(data, right, depth + 1, limit, rng)),
    }
}

fn path_length(node: &Node, x: &[f64], depth: usize) -> f64 {
    match node {
        Node::Leaf { size } => depth as f64 + average_path_length(*size),
        Node::Split { feature, threshold, left, right } => {
            if x[*feature] < *threshold {
                path_length(left, x, depth + 1)
            } else {
                path_length(right, x, depth + 1)
            }
        }
    }
}

impl IsolationForest {
    /// Each tree sees `min(sample_size, n)` points drawn without replacement and
    /// grows to depth `ceil(log2 ψ)`.
    pub fn fit(data: &[&[f64]], n_trees: usize, sample_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = sample_size.min(data.len()).max(1);
        let limit = (psi as f64).log2().ceil() as usize;
        let trees = (0..n_trees)
            .map(|_| {
                let mut idx = sample(&mut rng, data.len(), psi).into_vec();
                build(data, &mut idx, 0, limit, &mut rng)
            })
            .collect();
        Self {
            trees,
            sample_size: psi,
        }
    }

    /// Anomaly score `2^(−E[h(x)] / c(ψ))`: near 1 for anomalies, well below 0.5 for inliers.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mean = self.trees.iter().map(|t| path_length(t, x, 0)).sum::<f64>() / self.trees.len() as f64;
        let c = average_path_length(self.sample_size);
        if c == 0.0 {
            return 0.5;
        }
        2f64.powf(-mean / c)
    }

    pub fn score_all(&self, data: &[&[f64]]) -> Vec<f64> {
        data.iter().map(|x| self.score(x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_length_normaliser() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        // 2 H(255) − 2·255/256 with H(255) ≈ ln 255 + γ.
        assert!((average_path_length(256) - 10.244_770_920_116_851).abs() < 1e-9);
    }

    #[test]
    fn isolated_point_scores_highest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows: Vec<Vec<f64>> = (0..99)
            .map(|_| vec![rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)])
            .collect();
        rows.push(vec![10.0, 10.0]);
        let data: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let forest = IsolationForest::fit(&data, 100, 256, 0);
        let scores = forest.score_all(&data);
        let top = (0..100).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert_eq!(top, 99);
        assert!(scores[99] > 0.6);
    }
}
