//! L1-penalized weighted least squares by coordinate descent with
//! soft-thresholding, over a log-spaced lambda path from lambda_max
//! (all slopes zero) downward, with warm starts.
//!
//! Convention: minimize (1/2W) sum w_i (y_i - b0 - x_i'b)^2 + lambda |b|_1
//! on columns standardized to weighted mean 0 / variance 1, so the
//! intercept is the weighted mean of y and each coordinate update is a
//! plain soft-threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::stats::weighted_mean;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LassoSearch {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for LassoSearch {
    fn default() -> Self {
        LassoSearch {
            n_lambda: 100,
            lambda_min_ratio: 1e-3,
            tol: 1e-8,
            max_passes: 10_000,
        }
    }
}

/// Weighted standardization of a design matrix; zero-variance columns
/// are flagged and frozen at coefficient zero.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub x: Matrix,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub live: Vec<bool>,
}

pub fn standardize(x: &Matrix, w: &[f64]) -> Standardized {
    let n = x.rows;
    let p = x.cols;
    let sw: f64 = w.iter().sum();
    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    let mut live = vec![true; p];
    let mut out = Matrix::zeros(n, p);
    for j in 0..p {
        let mut m = 0.0;
        for i in 0..n {
            m += w[i] * x[(i, j)];
        }
        m /= sw;
        let mut v = 0.0;
        for i in 0..n {
            let d = x[(i, j)] - m;
            v += w[i] * d * d;
        }
        let sd = (v / sw).sqrt();
        means[j] = m;
        sds[j] = sd;
        if sd == 0.0 {
            live[j] = false;
            continue;
        }
        for i in 0..n {
            out[(i, j)] = (x[(i, j)] - m) / sd;
        }
    }
    Standardized {
        x: out,
        means,
        sds,
        live,
    }
}

/// Smallest lambda with an all-zero slope vector.
pub fn lambda_max(std: &Standardized, y: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let ybar = weighted_mean(y, w);
    let mut best = 0.0f64;
    for j in 0..std.x.cols {
        if !std.live[j] {
            continue;
        }
        let mut g = 0.0;
        for i in 0..std.x.rows {
            g += w[i] * std.x[(i, j)] * (y[i] - ybar);
        }
        best = best.max((g / sw).abs());
    }
    best
}

pub fn lambda_path(lmax: f64, search: &LassoSearch) -> Vec<f64> {
    if search.n_lambda <= 1 {
        return vec![lmax];
    }
    let lmin = lmax * search.lambda_min_ratio;
    (0..search.n_lambda)
        .map(|i| {
            let t = i as f64 / (search.n_lambda - 1) as f64;
            (lmax.max(1e-300).ln() * (1.0 - t) + lmin.max(1e-300).ln() * t).exp()
        })
        .collect()
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoPathPoint {
    pub lambda: f64,
    pub intercept: f64,
    /// Coefficients on standardized columns.
    pub coefs: Vec<f64>,
    pub passes: usize,
}

/// Fit the whole path with warm starts. Errors if coordinate descent
/// fails to converge at any lambda.
pub fn fit_path(
    std: &Standardized,
    y: &[f64],
    w: &[f64],
    lambdas: &[f64],
    search: &LassoSearch,
) -> Result<Vec<LassoPathPoint>> {
    let n = std.x.rows;
    let p = std.x.cols;
    let sw: f64 = w.iter().sum();
    let intercept = weighted_mean(y, w);
    let mut beta = vec![0.0; p];
    // Residual r = y - intercept - X beta, maintained across updates.
    let mut r: Vec<f64> = y.iter().map(|v| v - intercept).collect();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut passes = 0;
        loop {
            passes += 1;
            let mut max_change = 0.0f64;
            for j in 0..p {
                if !std.live[j] {
                    continue;
                }
                let old = beta[j];
                let mut rho = 0.0;
                for i in 0..n {
                    rho += w[i] * std.x[(i, j)] * r[i];
                }
                rho = rho / sw + old;
                let new = soft_threshold(rho, lambda);
                if new != old {
                    let d = new - old;
                    for i in 0..n {
                        r[i] -= d * std.x[(i, j)];
                    }
                    beta[j] = new;
                    max_change = max_change.max(d.abs());
                }
            }
            if max_change < search.tol {
                break;
            }
            if passes >= search.max_passes {
                return Err(Error::NotConverged {
                    what: format!("lasso coordinate descent at lambda {lambda:.6e}"),
                    iterations: passes,
                    criterion: search.tol,
                });
            }
        }
        out.push(LassoPathPoint {
            lambda,
            intercept,
            coefs: beta.clone(),
            passes,
        });
    }
    Ok(out)
}

/// Largest KKT violation at a path point: for active coordinates the
/// weighted gradient must equal -sign(beta_j) * lambda; for inactive
/// ones it must not exceed lambda in magnitude.
pub fn kkt_violation(
    std: &Standardized,
    y: &[f64],
    w: &[f64],
    point: &LassoPathPoint,
) -> f64 {
    let n = std.x.rows;
    let sw: f64 = w.iter().sum();
    let mut r = vec![0.0; n];
    for i in 0..n {
        let mut pred = point.intercept;
        for j in 0..std.x.cols {
            if point.coefs[j] != 0.0 {
                pred += std.x[(i, j)] * point.coefs[j];
            }
        }
        r[i] = y[i] - pred;
    }
    let mut worst = 0.0f64;
    for j in 0..std.x.cols {
        if !std.live[j] {
            continue;
        }
        let mut g = 0.0;
        for i in 0..n {
            g += w[i] * std.x[(i, j)] * r[i];
        }
        g /= sw;
        let v = if point.coefs[j] != 0.0 {
            (g - point.lambda * point.coefs[j].signum()).abs()
        } else {
            (g.abs() - point.lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

pub fn predict_standardized(std_row: &[f64], point: &LassoPathPoint) -> f64 {
    let mut pred = point.intercept;
    for (j, &c) in point.coefs.iter().enumerate() {
        if c != 0.0 {
            pred += std_row[j] * c;
        }
    }
    pred
}
