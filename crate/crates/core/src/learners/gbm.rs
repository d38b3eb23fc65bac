//! Squared-error gradient boosting: depth-limited trees on residuals,
//! shrinkage, and row subsampling by the bag fraction. Trees are
//! sequential by construction; only the per-tree bag draw consumes
//! randomness, from a substream keyed by the tree index.

use serde::{Deserialize, Serialize};

use super::tree::{build_tree, Tree, TreeNode, TreeOpts};
use crate::linalg::Matrix;
use crate::rng::{shuffled_indices, substream, Domain};
use crate::stats::weighted_mean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub depth: usize,
    pub learning_rate: f64,
    pub bag_fraction: f64,
    pub n_trees: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gbm {
    pub params: GbmParams,
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

impl Gbm {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut f = self.base_score;
        for t in &self.trees {
            f += self.params.learning_rate * t.predict_row(row);
        }
        f
    }
}

pub fn fit_gbm(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    params: &GbmParams,
    seed: u64,
    stream_salt: u64,
) -> Gbm {
    let n = x.rows;
    let base_score = weighted_mean(y, w);
    let mut fitted = vec![base_score; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    let bag_size = ((params.bag_fraction * n as f64).floor() as usize).clamp(1, n);
    let opts = TreeOpts {
        max_depth: Some(params.depth),
        min_node: 1,
        mtry: None,
    };
    if params.learning_rate == 0.0 {
        return Gbm {
            params: *params,
            base_score,
            trees,
        };
    }
    let mut residuals = vec![0.0; n];
    for t in 0..params.n_trees {
        let mut rng = substream(
            seed,
            Domain::GbmTree,
            stream_salt.wrapping_mul(1_000_003).wrapping_add(t as u64),
        );
        for i in 0..n {
            residuals[i] = y[i] - fitted[i];
        }
        let rows: Vec<u32> = if bag_size == n {
            (0..n as u32).collect()
        } else {
            let order = shuffled_indices(n, &mut rng);
            let mut rows: Vec<u32> = order[..bag_size].iter().map(|&i| i as u32).collect();
            rows.sort_unstable();
            rows
        };
        let tree = build_tree(x, rows, &residuals, w, &opts, &mut rng);
        for i in 0..n {
            fitted[i] += params.learning_rate * tree.predict_row(x.row(i));
        }
        trees.push(tree);
    }
    Gbm {
        params: *params,
        base_score,
        trees,
    }
}

/// Squared-error improvement per feature, summed over splits, averaged
/// across trees, and normalized so the largest equals 100.
pub fn variable_importance(gbm: &Gbm, n_features: usize) -> Vec<f64> {
    let mut raw = vec![0.0; n_features];
    for tree in &gbm.trees {
        for node in &tree.nodes {
            if let TreeNode::Split {
                feature,
                improvement,
                ..
            } = node
            {
                raw[*feature] += *improvement;
            }
        }
    }
    if !gbm.trees.is_empty() {
        for v in &mut raw {
            *v /= gbm.trees.len() as f64;
        }
    }
    let max = raw.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut raw {
            *v = *v / max * 100.0;
        }
    }
    raw
}
