//! Government-membership logit and ATT-style design weights.
//!
//! The logit predicts the government dummy from occupation, sector, age,
//! and sex on the government + private sample (self-employed, casual and
//! unpaid "other" workers are dropped by an explicit filter first).
//! Controls are reweighted by p/(1-p) so their covariate distribution
//! matches the treated group; the resulting design weight is multiplied
//! into the survey weight to form the analysis weight.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::panel::{Group, Panel};

const IRLS_GRADIENT_TOL: f64 = 1e-10;
const IRLS_MAX_ITER: usize = 100;
/// Coefficient magnitude at which a non-converged fit is called separated.
const SEPARATION_COEF_BOUND: f64 = 30.0;
pub const DEFAULT_PROPENSITY_CLIP: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone)]
pub struct LogitFit {
    pub feature_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl LogitFit {
    pub fn predict_index(&self, row: &[f64]) -> f64 {
        row.iter()
            .zip(&self.coefficients)
            .map(|(x, b)| x * b)
            .sum()
    }

    pub fn predict_prob(&self, row: &[f64]) -> f64 {
        logistic(self.predict_index(row))
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted maximum-likelihood logit via iteratively reweighted least
/// squares (Newton steps on the weighted log likelihood). Deterministic.
pub fn fit_logit(
    features: &Matrix,
    feature_names: &[String],
    labels: &[u8],
    weights: &[f64],
) -> Result<LogitFit> {
    let n = features.rows;
    let k = features.cols;
    if labels.len() != n || weights.len() != n {
        return Err(Error::invalid("fit_logit: length mismatch"));
    }
    let mut w_pos = 0.0;
    let mut w_neg = 0.0;
    for i in 0..n {
        if weights[i] < 0.0 {
            return Err(Error::invalid("fit_logit: negative weight"));
        }
        if weights[i] > 0.0 {
            if labels[i] == 1 {
                w_pos += weights[i];
            } else {
                w_neg += weights[i];
            }
        }
    }
    if w_pos == 0.0 || w_neg == 0.0 {
        return Err(Error::invalid(
            "fit_logit: need both label values with positive weight",
        ));
    }
    // Constant non-intercept columns make the design rank deficient
    // together with the intercept; catch them up front by name.
    let mut degenerate = Vec::new();
    for j in 0..k {
        let col = features.column(j);
        let first = col[0];
        if feature_names[j] != "intercept" && col.iter().all(|&v| v == first) {
            degenerate.push(feature_names[j].clone());
        }
    }
    if !degenerate.is_empty() {
        return Err(Error::RankDeficient(degenerate));
    }

    let mut beta = vec![0.0; k];
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..IRLS_MAX_ITER {
        iterations += 1;
        let eta = features.matvec(&beta);
        let mu: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        // Gradient: X' w (y - mu). Hessian: X' w mu (1-mu) X.
        let mut grad = vec![0.0; k];
        let mut hess = Matrix::zeros(k, k);
        for i in 0..n {
            let wi = weights[i];
            if wi == 0.0 {
                continue;
            }
            let row = features.row(i);
            let resid = labels[i] as f64 - mu[i];
            let s = wi * mu[i] * (1.0 - mu[i]);
            for a in 0..k {
                grad[a] += wi * resid * row[a];
                for b in a..k {
                    hess[(a, b)] += s * row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let max_grad = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if max_grad < IRLS_GRADIENT_TOL {
            converged = true;
            break;
        }
        let step = linalg::solve_sym(&hess, &grad, linalg::DEFAULT_PIVOT_TOL);
        if !step.dropped.is_empty() {
            return Err(Error::RankDeficient(
                step.dropped
                    .iter()
                    .map(|&j| feature_names[j].clone())
                    .collect(),
            ));
        }
        for a in 0..k {
            beta[a] += step.solution[a];
        }
    }
    // Under perfect separation the likelihood has no maximum: coefficients
    // diverge while the gradient underflows, so a "converged" flag alone
    // is not trustworthy. A runaway coefficient names the culprit.
    let (j_max, b_max) = beta
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(j, b)| (j, *b))
        .unwrap();
    if b_max.abs() > SEPARATION_COEF_BOUND {
        return Err(Error::PerfectSeparation {
            feature: feature_names[j_max].clone(),
        });
    }
    if !converged {
        return Err(Error::NotConverged {
            what: "logit IRLS".into(),
            iterations,
            criterion: IRLS_GRADIENT_TOL,
        });
    }

    let eta = features.matvec(&beta);
    let mut ll = 0.0;
    for i in 0..n {
        let p = logistic(eta[i]);
        let lik = if labels[i] == 1 { p } else { 1.0 - p };
        ll += weights[i] * lik.max(1e-300).ln();
    }
    Ok(LogitFit {
        feature_names: feature_names.to_vec(),
        coefficients: beta,
        converged,
        iterations,
        log_likelihood: ll,
    })
}

/// ATT design weight: 1 for treated, p/(1-p) for controls. Propensities
/// at or above the clip are clamped; the caller receives the clip flag.
pub fn att_weight(p: f64, treated: bool, clip: f64) -> (f64, bool) {
    assert!(p > 0.0 && p < 1.0, "propensity must be in (0,1)");
    if treated {
        return (1.0, false);
    }
    if p >= clip {
        (clip / (1.0 - clip), true)
    } else {
        (p / (1.0 - p), false)
    }
}

/// Per-observation propensity output for the weights file.
#[derive(Debug, Clone)]
pub struct PropensityRow {
    pub worker_id: String,
    pub year: i32,
    pub propensity: f64,
    pub analysis_weight: f64,
}

#[derive(Debug, Clone)]
pub struct PropensityOutcome {
    pub fit: LogitFit,
    /// Aligned with the panel's observation order; zero for excluded
    /// ("other") observations.
    pub analysis_weights: Vec<f64>,
    pub rows: Vec<PropensityRow>,
    pub n_excluded_other: usize,
    pub n_clipped: usize,
}

/// Build the design (intercept, occupation dummies, sector dummies, age,
/// male), fit the logit on government + private observations, and form
/// analysis weights = survey weight x ATT weight. "Other" observations
/// are excluded by the sample filter and get analysis weight zero.
pub fn propensity_weights(panel: &Panel, survey_weighted: bool) -> Result<PropensityOutcome> {
    let keep: Vec<usize> = panel
        .observations()
        .iter()
        .enumerate()
        .filter(|(_, o)| o.group != Group::Other)
        .map(|(i, _)| i)
        .collect();
    let n_excluded_other = panel.n_obs() - keep.len();
    if keep.is_empty() {
        return Err(Error::invalid("propensity: no government/private observations"));
    }

    let n_occ = panel.occupations.len();
    let n_sec = panel.sectors.len();
    let mut names = vec!["intercept".to_string()];
    // Reference categories: first occupation and sector codes.
    for c in 1..n_occ {
        names.push(format!("occ:{}", panel.occupations.label(c as u16)));
    }
    for c in 1..n_sec {
        names.push(format!("sec:{}", panel.sectors.label(c as u16)));
    }
    names.push("age".into());
    names.push("male".into());
    let k = names.len();

    let mut x = Matrix::zeros(keep.len(), k);
    let mut labels = Vec::with_capacity(keep.len());
    let mut weights = Vec::with_capacity(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        let o = &panel.observations()[i];
        let mut c = 0;
        x[(r, c)] = 1.0;
        c += 1;
        for occ in 1..n_occ {
            x[(r, c)] = (o.occupation as usize == occ) as u8 as f64;
            c += 1;
        }
        for sec in 1..n_sec {
            x[(r, c)] = (o.sector as usize == sec) as u8 as f64;
            c += 1;
        }
        x[(r, c)] = (o.year - o.birth_year) as f64;
        c += 1;
        x[(r, c)] = o.male as u8 as f64;
        labels.push((o.group == Group::Government) as u8);
        weights.push(if survey_weighted { o.survey_weight } else { 1.0 });
    }

    let fit = fit_logit(&x, &names, &labels, &weights)?;

    let mut analysis_weights = vec![0.0; panel.n_obs()];
    let mut rows = Vec::with_capacity(keep.len());
    let mut n_clipped = 0;
    for (r, &i) in keep.iter().enumerate() {
        let o = &panel.observations()[i];
        let p = fit.predict_prob(x.row(r));
        let (design_w, clipped) = att_weight(
            p.clamp(1e-12, 1.0 - 1e-12),
            o.group == Group::Government,
            DEFAULT_PROPENSITY_CLIP,
        );
        if clipped {
            n_clipped += 1;
        }
        let aw = o.survey_weight * design_w;
        analysis_weights[i] = aw;
        rows.push(PropensityRow {
            worker_id: panel.worker_id(o.worker).to_string(),
            year: o.year,
            propensity: p,
            analysis_weight: aw,
        });
    }

    Ok(PropensityOutcome {
        fit,
        analysis_weights,
        rows,
        n_excluded_other,
        n_clipped,
    })
}

pub fn write_weights_csv(rows: &[PropensityRow], path: &std::path::Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["worker_id", "year", "p", "analysis_weight"])?;
    for r in rows {
        wtr.write_record([
            r.worker_id.as_str(),
            &r.year.to_string(),
            &r.propensity.to_string(),
            &r.analysis_weight.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a weights file and return analysis weights aligned with the
/// panel's observation order (zero where absent).
pub fn read_weights_csv(panel: &Panel, path: &std::path::Path) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut by_key: std::collections::HashMap<(u32, i32), f64> = std::collections::HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let id = row.get(0).unwrap_or("");
        let year: i32 = row
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::invalid("weights csv: bad year"))?;
        let aw: f64 = row
            .get(3)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::invalid("weights csv: bad analysis_weight"))?;
        if let Some(code) = panel.worker_code(id) {
            by_key.insert((code, year), aw);
        }
    }
    Ok(panel
        .observations()
        .iter()
        .map(|o| by_key.get(&(o.worker, o.year)).copied().unwrap_or(0.0))
        .collect())
}
