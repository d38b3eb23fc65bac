//! Random forest regression: bagging over workers with draw probability
//! proportional to the analysis weight, feature subsampling per split,
//! and per-tree substreams so the ensemble is schedule-independent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::{build_tree, Tree, TreeOpts};
use crate::linalg::Matrix;
use crate::par;
use crate::rng::{substream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Mtry {
    Sqrt,
    Third,
    Half,
}

impl Mtry {
    pub fn resolve(&self, p: usize) -> usize {
        let m = match self {
            Mtry::Sqrt => (p as f64).sqrt().floor() as usize,
            Mtry::Third => p / 3,
            Mtry::Half => p / 2,
        };
        m.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub mtry: Mtry,
    pub min_node: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Forest {
    pub params: ForestParams,
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        if self.trees.is_empty() {
            return 0.0;
        }
        let s: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        s / self.trees.len() as f64
    }
}

/// Weighted bootstrap: n draws with replacement, P(row) proportional to
/// its weight, via inverse-CDF on the cumulative weights.
fn weighted_bootstrap<R: Rng>(cum: &[f64], total: f64, n: usize, rng: &mut R) -> Vec<u32> {
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let idx = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        rows.push(idx as u32);
    }
    rows
}

/// Fit a forest on `(x, y, w)`. `stream_salt` must be unique per fit so
/// that fold/config fits draw independent tree substreams.
pub fn fit_forest(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    params: &ForestParams,
    seed: u64,
    stream_salt: u64,
) -> Forest {
    let n = x.rows;
    let mut cum = Vec::with_capacity(n);
    let mut total = 0.0;
    for &wi in w {
        total += wi;
        cum.push(total);
    }
    let mtry = params.mtry.resolve(x.cols);
    let opts = TreeOpts {
        max_depth: None,
        min_node: params.min_node,
        mtry: Some(mtry),
    };
    // Bootstrap draws enter the tree with unit multiplicity weight; the
    // analysis weights act through the draw probabilities.
    let unit_w = vec![1.0; n];
    let trees = par::map_indexed(params.n_trees, |t| {
        let mut rng = substream(
            seed,
            Domain::ForestTree,
            stream_salt.wrapping_mul(1_000_003).wrapping_add(t as u64),
        );
        let rows = weighted_bootstrap(&cum, total, n, &mut rng);
        build_tree(x, rows, y, &unit_w, &opts, &mut rng)
    });
    Forest {
        params: *params,
        trees,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::weighted_mean;

    #[test]
    fn single_leaf_forest_predicts_weighted_mean() {
        let x = Matrix::from_columns(&[vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]]);
        let y = vec![1.0, 5.0, 2.0, 8.0, 3.0, 0.5];
        let w = vec![1.0, 2.0, 0.5, 1.5, 3.0, 1.0];
        let params = ForestParams {
            n_trees: 400,
            mtry: Mtry::Sqrt,
            min_node: 100, // >= n: never splits
        };
        let forest = fit_forest(&x, &y, &w, &params, 11, 0);
        let target = weighted_mean(&y, &w);
        // Each tree's root leaf is a bootstrap mean with expectation
        // equal to the weighted mean; 400 trees average it down.
        let pred = forest.predict_row(&[2.0]);
        let sd = crate::stats::weighted_var(&y, &w).sqrt();
        assert!(
            (pred - target).abs() < 3.0 * sd / (6.0f64 * 400.0).sqrt() + 0.05,
            "pred {pred} target {target}"
        );
        assert!(forest.trees.iter().all(|t| t.n_leaves() == 1));
    }

    #[test]
    fn forest_is_deterministic_per_salt() {
        let x = Matrix::from_columns(&[
            (0..50).map(|i| (i % 7) as f64).collect(),
            (0..50).map(|i| (i % 5) as f64).collect(),
        ]);
        let y: Vec<f64> = (0..50).map(|i| (i % 7) as f64 * 0.5 + (i % 5) as f64).collect();
        let w = vec![1.0; 50];
        let params = ForestParams {
            n_trees: 20,
            mtry: Mtry::Half,
            min_node: 5,
        };
        let a = fit_forest(&x, &y, &w, &params, 3, 42);
        let b = fit_forest(&x, &y, &w, &params, 3, 42);
        let c = fit_forest(&x, &y, &w, &params, 3, 43);
        let row = [3.0, 2.0];
        assert_eq!(a.predict_row(&row).to_bits(), b.predict_row(&row).to_bits());
        assert_ne!(a.predict_row(&row).to_bits(), c.predict_row(&row).to_bits());
    }

    #[test]
    fn mtry_resolution() {
        assert_eq!(Mtry::Sqrt.resolve(25), 5);
        assert_eq!(Mtry::Third.resolve(25), 8);
        assert_eq!(Mtry::Half.resolve(25), 12);
        assert_eq!(Mtry::Third.resolve(2), 1);
    }
}
