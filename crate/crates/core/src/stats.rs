//! Weighted-statistics primitives shared by every estimation stage.

use crate::error::{Error, Result};

pub fn weighted_mean(values: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let s: f64 = values.iter().zip(w).map(|(v, wi)| v * wi).sum();
    s / sw
}

/// Weighted population variance (denominator sum of weights).
pub fn weighted_var(values: &[f64], w: &[f64]) -> f64 {
    let m = weighted_mean(values, w);
    let sw: f64 = w.iter().sum();
    let s: f64 = values
        .iter()
        .zip(w)
        .map(|(v, wi)| wi * (v - m) * (v - m))
        .sum();
    s / sw
}

/// Weighted R^2 = 1 - SSE/TSS around the weighted mean. May be negative.
pub fn weighted_r2(y: &[f64], yhat: &[f64], w: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() || y.len() != w.len() {
        return Err(Error::invalid("weighted_r2: length mismatch"));
    }
    if y.len() < 2 {
        return Err(Error::invalid("weighted_r2: need at least 2 observations"));
    }
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::invalid("weighted_r2: total weight must be positive"));
    }
    let ybar = weighted_mean(y, w);
    let mut sse = 0.0;
    let mut tss = 0.0;
    for i in 0..y.len() {
        sse += w[i] * (y[i] - yhat[i]) * (y[i] - yhat[i]);
        tss += w[i] * (y[i] - ybar) * (y[i] - ybar);
    }
    if tss == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(1.0 - sse / tss)
}

/// exp(b) - 1: log points to a multiplicative premium.
pub fn log_points_to_premium(b: f64) -> f64 {
    b.exp() - 1.0
}

/// Left-continuous inverse of the weighted ECDF at probability `p`:
/// the smallest value whose cumulative weight reaches `p * total`.
pub fn weighted_quantile(values: &[f64], w: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = w.iter().sum();
    let target = p * total;
    let mut cum = 0.0;
    for &i in &idx {
        cum += w[i];
        if cum >= target {
            return values[i];
        }
    }
    values[idx[values.len() - 1]]
}

/// Weighted median with the midpoint rule: when the cumulative weight
/// hits exactly half the total at some value, average it with the next
/// distinct value. Two equally-weighted points therefore give their
/// midpoint, matching the unweighted convention.
pub fn weighted_median(values: &[f64], w: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = w.iter().sum();
    let half = 0.5 * total;
    let mut cum = 0.0;
    for (pos, &i) in idx.iter().enumerate() {
        cum += w[i];
        if cum > half + 1e-12 * total {
            return values[i];
        }
        if (cum - half).abs() <= 1e-12 * total {
            return match idx.get(pos + 1) {
                Some(&j) => 0.5 * (values[i] + values[j]),
                None => values[i],
            };
        }
    }
    values[idx[values.len() - 1]]
}

/// Clamp to the weighted percentiles [lower_pct, upper_pct]; values
/// strictly inside are untouched.
pub fn winsorize_logs(values: &[f64], lower_pct: f64, upper_pct: f64, w: &[f64]) -> Vec<f64> {
    assert!(0.0 <= lower_pct && lower_pct < upper_pct && upper_pct <= 100.0);
    let lo = weighted_quantile(values, w, lower_pct / 100.0);
    let hi = weighted_quantile(values, w, upper_pct / 100.0);
    values.iter().map(|&v| v.clamp(lo, hi)).collect()
}

/// Weighted Pearson correlation.
pub fn weighted_pearson(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let ma = weighted_mean(a, w);
    let mb = weighted_mean(b, w);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += w[i] * da * db;
        saa += w[i] * da * da;
        sbb += w[i] * db * db;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// Weighted Spearman correlation: weighted Pearson on mid-ranks
/// (ties share the average rank).
pub fn weighted_spearman(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let ra = midranks(a);
    let rb = midranks(b);
    weighted_pearson(&ra, &rb, w)
}

fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF via erfc, accurate deep into both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Chi-squared(1) upper tail probability.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    libm::erfc((x / 2.0).sqrt())
}
