//! Selection-on-unobservables correction: probit first stage with an
//! instrument, inverse Mills ratio, Robinson-style partialling with a
//! Mundlak device, an exclusion test, and corrected skill signals.
//!
//! Worker fixed effects would absorb the inverse Mills ratio, so the
//! outcome equation instead adds within-worker means of the time-varying
//! regressors (experience and its square) and the worker-level average
//! IMR. Covariates are partialled out of the outcome and every linear
//! regressor with cross-fitted conditional means (out-of-fold by worker)
//! before the final OLS, which absorbs province effects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::gbm::{fit_gbm, GbmParams};
use crate::linalg::{cov_hc1, solve_sym, wls, Matrix};
use crate::panel::{CovariateMatrix, Group, Panel};
use crate::price::SkillPriceSeries;
use crate::profile::{SkillSignal, SkillSignals};
use crate::rng::{shuffled_indices, substream, Domain};
use crate::stats::{chi2_1_sf, normal_pdf, weighted_var};

const PROBIT_GRAD_TOL: f64 = 1e-8;
const PROBIT_MAX_ITER: usize = 100;
const SEPARATION_COEF_BOUND: f64 = 30.0;
/// Switch point between the erfc formula and the tail continued
/// fraction.
const MILLS_TAIL_CUTOFF: f64 = -8.0;

/// Inverse Mills ratio phi(x)/Phi(x), stable over the whole real line.
/// Below the cutoff, Phi underflows long before the ratio does, so the
/// tail uses the Laplace continued fraction for the Mills ratio.
pub fn inverse_mills(x: f64) -> f64 {
    if x >= MILLS_TAIL_CUTOFF {
        let phi = normal_pdf(x);
        let cap_phi = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
        // Far right tail: the true value dips below the smallest
        // positive double (phi underflows near x = 38.6); floor keeps
        // the function positive and weakly decreasing.
        (phi / cap_phi).max(f64::MIN_POSITIVE)
    } else {
        // phi/Phi at x = t + T1 with t = -x and T_k = k / (t + T_{k+1}).
        let t = -x;
        let mut tail = 0.0;
        for k in (1..=64u32).rev() {
            tail = k as f64 / (t + tail);
        }
        t + tail
    }
}

#[derive(Debug, Clone)]
pub struct ProbitFit {
    pub feature_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub robust_cov: Matrix,
    pub instrument_index: usize,
    pub wald_instrument: f64,
    pub p_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl ProbitFit {
    pub fn index(&self, row: &[f64]) -> f64 {
        row.iter()
            .zip(&self.coefficients)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Weighted probit maximum likelihood via Fisher scoring, with a
/// heteroskedasticity-robust Wald test on the instrument column.
pub fn fit_probit(
    x: &Matrix,
    names: &[String],
    s: &[u8],
    w: &[f64],
    instrument_index: usize,
) -> Result<ProbitFit> {
    let n = x.rows;
    let k = x.cols;
    if s.len() != n || w.len() != n {
        return Err(Error::invalid("fit_probit: length mismatch"));
    }
    let inst_col = x.column(instrument_index);
    if inst_col.iter().all(|&v| v == inst_col[0]) {
        return Err(Error::invalid("fit_probit: instrument does not vary"));
    }
    let mut beta = vec![0.0; k];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..PROBIT_MAX_ITER {
        iterations += 1;
        let eta = x.matvec(&beta);
        let mut grad = vec![0.0; k];
        let mut info = Matrix::zeros(k, k);
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let row = x.row(i);
            let lam_pos = inverse_mills(eta[i]);
            let lam_neg = inverse_mills(-eta[i]);
            let score = if s[i] == 1 { lam_pos } else { -lam_neg };
            let fisher = lam_pos * lam_neg;
            for a in 0..k {
                grad[a] += w[i] * score * row[a];
                for b in a..k {
                    info[(a, b)] += w[i] * fisher * row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let max_grad = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if max_grad < PROBIT_GRAD_TOL {
            converged = true;
        }
        let step = solve_sym(&info, &grad, crate::linalg::DEFAULT_PIVOT_TOL);
        if !step.dropped.is_empty() {
            return Err(Error::RankDeficient(
                step.dropped.iter().map(|&j| names[j].clone()).collect(),
            ));
        }
        if converged {
            break;
        }
        for a in 0..k {
            beta[a] += step.solution[a];
        }
    }
    let (j_max, b_max) = beta
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(j, v)| (j, *v))
        .unwrap();
    if b_max.abs() > SEPARATION_COEF_BOUND {
        return Err(Error::PerfectSeparation {
            feature: names[j_max].clone(),
        });
    }
    if !converged {
        return Err(Error::NotConverged {
            what: "probit Newton-Raphson".into(),
            iterations,
            criterion: PROBIT_GRAD_TOL,
        });
    }

    // Sandwich covariance: A^-1 B A^-1 with A the Fisher information and
    // B the outer product of per-observation scores.
    let eta = x.matvec(&beta);
    let mut info = Matrix::zeros(k, k);
    let mut meat = Matrix::zeros(k, k);
    let mut ll = 0.0;
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let row = x.row(i);
        let lam_pos = inverse_mills(eta[i]);
        let lam_neg = inverse_mills(-eta[i]);
        let score = if s[i] == 1 { lam_pos } else { -lam_neg };
        let fisher = lam_pos * lam_neg;
        let p = crate::stats::normal_cdf(eta[i]);
        ll += w[i] * if s[i] == 1 { p } else { 1.0 - p }.max(1e-300).ln();
        for a in 0..k {
            for b in a..k {
                info[(a, b)] += w[i] * fisher * row[a] * row[b];
                meat[(a, b)] += w[i] * w[i] * score * score * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
            meat[(a, b)] = meat[(b, a)];
        }
    }
    let (info_inv, _) = crate::linalg::invert_sym(&info, crate::linalg::DEFAULT_PIVOT_TOL);
    let mut cov = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut v = 0.0;
            for c in 0..k {
                for d in 0..k {
                    v += info_inv[(a, c)] * meat[(c, d)] * info_inv[(d, b)];
                }
            }
            cov[(a, b)] = v;
        }
    }
    let var_inst = cov[(instrument_index, instrument_index)];
    let wald = beta[instrument_index] * beta[instrument_index] / var_inst.max(1e-300);
    Ok(ProbitFit {
        feature_names: names.to_vec(),
        coefficients: beta,
        robust_cov: cov,
        instrument_index,
        wald_instrument: wald,
        p_value: chi2_1_sf(wald),
        converged,
        iterations,
        log_likelihood: ll,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMeanLearner {
    /// Cross-fitted weighted OLS on the covariate features.
    Linear,
    /// Cross-fitted gradient boosting.
    Gbm(GbmParams),
}

impl Default for CondMeanLearner {
    fn default() -> Self {
        CondMeanLearner::Gbm(GbmParams {
            depth: 4,
            learning_rate: 0.1,
            bag_fraction: 0.8,
            n_trees: 100,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeckmanConfig {
    /// Covariate column holding the worker-level binary instrument.
    pub instrument: String,
    #[serde(default)]
    pub learner: CondMeanLearner,
    pub cross_fit_folds: usize,
    pub seed: u64,
    /// Period effects in the probit index.
    pub include_year_effects: bool,
}

impl Default for HeckmanConfig {
    fn default() -> Self {
        HeckmanConfig {
            instrument: "parent_private".into(),
            learner: CondMeanLearner::default(),
            cross_fit_folds: 5,
            seed: 23,
            include_year_effects: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeckmanOutcome {
    pub probit: ProbitFit,
    /// Coefficient on the worker-average inverse Mills ratio.
    pub gamma_imr: f64,
    pub gamma_se: f64,
    /// Corrected experience profile.
    pub delta0: f64,
    pub delta1: f64,
    pub delta_se: (f64, f64),
    pub exclusion_wald: f64,
    pub exclusion_p: f64,
    pub corrected_signals: SkillSignals,
    /// Cross-fit fold per outcome-sample observation (bookkeeping for
    /// the out-of-fold guarantee).
    pub fold_of_obs: Vec<usize>,
}

struct ProbitDesign {
    x: Matrix,
    names: Vec<String>,
    s: Vec<u8>,
    w: Vec<f64>,
    /// Observation index into the panel per design row.
    obs_index: Vec<usize>,
    instrument_index: usize,
}

/// Drop columns whose Gram pivot vanishes (exhaustive dummy blocks and
/// the like), keeping earlier columns. Errors if the instrument itself
/// is collinear.
fn screen_full_rank(
    x: Matrix,
    names: Vec<String>,
    w: &[f64],
    instrument_index: usize,
) -> Result<(Matrix, Vec<String>, usize)> {
    let zeros = vec![0.0; x.rows];
    let (gram, _) = x.weighted_gram(&zeros, w);
    let probe = solve_sym(&gram, &vec![0.0; x.cols], crate::linalg::DEFAULT_PIVOT_TOL);
    if probe.dropped.is_empty() {
        return Ok((x, names, instrument_index));
    }
    if probe.dropped.contains(&instrument_index) {
        return Err(Error::RankDeficient(vec![names[instrument_index].clone()]));
    }
    let keep: Vec<usize> = (0..x.cols).filter(|j| !probe.dropped.contains(j)).collect();
    let mut out = Matrix::zeros(x.rows, keep.len());
    for i in 0..x.rows {
        for (c, &j) in keep.iter().enumerate() {
            out[(i, c)] = x[(i, j)];
        }
    }
    let new_names: Vec<String> = keep.iter().map(|&j| names[j].clone()).collect();
    let new_instrument = keep
        .iter()
        .position(|&j| j == instrument_index)
        .expect("instrument kept");
    Ok((out, new_names, new_instrument))
}

/// Probit design: intercept, skill covariates (instrument excluded from
/// the block and appended separately), experience, experience squared,
/// Mundlak means of both, the instrument, province dummies, and year
/// dummies when enabled. Sample: government + private observations.
fn build_probit_design(
    panel: &Panel,
    covariates: &CovariateMatrix,
    cfg: &HeckmanConfig,
) -> Result<ProbitDesign> {
    let (features, feature_names) = covariates.feature_matrix();
    let inst_col_in_features = feature_names
        .iter()
        .position(|n| n == &cfg.instrument)
        .ok_or_else(|| {
            Error::invalid(format!("instrument column {:?} not in covariates", cfg.instrument))
        })?;
    let skill_cols: Vec<usize> = (0..features.cols)
        .filter(|&j| j != inst_col_in_features)
        .collect();

    // Mundlak means per worker over their usable observations.
    let mut e_sum: std::collections::HashMap<u32, (f64, f64, usize)> =
        std::collections::HashMap::new();
    for o in panel.observations() {
        if o.group == Group::Other {
            continue;
        }
        let e = e_sum.entry(o.worker).or_insert((0.0, 0.0, 0));
        e.0 += o.experience;
        e.1 += o.experience * o.experience;
        e.2 += 1;
    }

    let years = panel.years();
    let n_prov = panel.provinces.len();
    let mut names = vec!["intercept".to_string()];
    names.extend(skill_cols.iter().map(|&j| feature_names[j].clone()));
    names.push("experience".into());
    names.push("experience_sq".into());
    names.push("mean_experience".into());
    names.push("mean_experience_sq".into());
    names.push(cfg.instrument.clone());
    let instrument_index = names.len() - 1;
    for p in 1..n_prov {
        names.push(format!("prov:{}", panel.provinces.label(p as u16)));
    }
    if cfg.include_year_effects {
        for y in years.iter().skip(1) {
            names.push(format!("year:{y}"));
        }
    }
    let k = names.len();

    let mut rows = Vec::new();
    for (i, o) in panel.observations().iter().enumerate() {
        if o.group == Group::Other {
            continue;
        }
        if covariates.row_of(panel.worker_id(o.worker)).is_some() {
            rows.push(i);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("probit: no usable observations"));
    }
    let mut x = Matrix::zeros(rows.len(), k);
    let mut s = Vec::with_capacity(rows.len());
    let mut w = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let o = &panel.observations()[i];
        let cov_row = covariates.row_of(panel.worker_id(o.worker)).unwrap();
        let mut c = 0;
        x[(r, c)] = 1.0;
        c += 1;
        for &j in &skill_cols {
            x[(r, c)] = features[(cov_row, j)];
            c += 1;
        }
        x[(r, c)] = o.experience;
        c += 1;
        x[(r, c)] = o.experience * o.experience;
        c += 1;
        let (se, se2, cnt) = e_sum[&o.worker];
        x[(r, c)] = se / cnt as f64;
        c += 1;
        x[(r, c)] = se2 / cnt as f64;
        c += 1;
        x[(r, c)] = features[(cov_row, inst_col_in_features)];
        c += 1;
        for p in 1..n_prov {
            x[(r, c)] = (o.province as usize == p) as u8 as f64;
            c += 1;
        }
        if cfg.include_year_effects {
            for y in years.iter().skip(1) {
                x[(r, c)] = (o.year == *y) as u8 as f64;
                c += 1;
            }
        }
        s.push((o.group == Group::Private) as u8);
        w.push(o.survey_weight);
    }
    let (x, names, instrument_index) = screen_full_rank(x, names, &w, instrument_index)?;
    Ok(ProbitDesign {
        x,
        names,
        s,
        w,
        obs_index: rows,
        instrument_index,
    })
}

/// Cross-fitted conditional means of `targets` given the covariate
/// features, out-of-fold by worker. Returns residuals per target and the
/// fold of each row.
#[allow(clippy::too_many_arguments)]
fn cross_fit_residuals(
    features: &Matrix,
    row_worker: &[u32],
    targets: &[Vec<f64>],
    weights: &[f64],
    learner: &CondMeanLearner,
    k_folds: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let n = features.rows;
    // Worker-level folds.
    let mut workers: Vec<u32> = row_worker.to_vec();
    workers.sort_unstable();
    workers.dedup();
    let mut rng = substream(seed, Domain::CrossFit, 0);
    let order = shuffled_indices(workers.len(), &mut rng);
    let mut fold_of_worker: std::collections::HashMap<u32, usize> =
        std::collections::HashMap::new();
    for (pos, &wi) in order.iter().enumerate() {
        fold_of_worker.insert(workers[wi], pos % k_folds);
    }
    let fold_of_row: Vec<usize> = row_worker.iter().map(|w| fold_of_worker[w]).collect();

    let mut residuals: Vec<Vec<f64>> = targets.iter().map(|t| t.clone()).collect();
    for fold in 0..k_folds {
        let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of_row[i] != fold).collect();
        let test_rows: Vec<usize> = (0..n).filter(|&i| fold_of_row[i] == fold).collect();
        if train_rows.is_empty() || test_rows.is_empty() {
            continue;
        }
        let mut x_tr = Matrix::zeros(train_rows.len(), features.cols);
        for (r, &i) in train_rows.iter().enumerate() {
            x_tr.row_mut(r).copy_from_slice(features.row(i));
        }
        let w_tr: Vec<f64> = train_rows.iter().map(|&i| weights[i]).collect();
        for (t_idx, target) in targets.iter().enumerate() {
            let y_tr: Vec<f64> = train_rows.iter().map(|&i| target[i]).collect();
            match learner {
                CondMeanLearner::Linear => {
                    let mut cols = vec![vec![1.0; train_rows.len()]];
                    for j in 0..x_tr.cols {
                        cols.push(x_tr.column(j));
                    }
                    let design = Matrix::from_columns(&cols);
                    let fit = wls(&design, &y_tr, &w_tr);
                    for &i in &test_rows {
                        let mut pred = fit.coefs[0];
                        for j in 0..features.cols {
                            pred += fit.coefs[j + 1] * features[(i, j)];
                        }
                        residuals[t_idx][i] = target[i] - pred;
                    }
                }
                CondMeanLearner::Gbm(params) => {
                    let model = fit_gbm(
                        &x_tr,
                        &y_tr,
                        &w_tr,
                        params,
                        seed,
                        (fold as u64 + 1) * 131 + t_idx as u64,
                    );
                    for &i in &test_rows {
                        residuals[t_idx][i] = target[i] - model.predict_row(features.row(i));
                    }
                }
            }
        }
    }
    Ok((residuals, fold_of_row))
}

/// Full selection correction: probit, worker-average IMR, Robinson
/// partialling, province-absorbed OLS for (gamma, delta), exclusion
/// test, and corrected skill signals.
pub fn heckman_correction(
    panel: &Panel,
    covariates: &CovariateMatrix,
    price: &SkillPriceSeries,
    cfg: &HeckmanConfig,
) -> Result<HeckmanOutcome> {
    let design = build_probit_design(panel, covariates, cfg)?;
    let probit = fit_probit(
        &design.x,
        &design.names,
        &design.s,
        &design.w,
        design.instrument_index,
    )?;

    // Worker-average IMR over all usable observations.
    let mut imr_sum: std::collections::HashMap<u32, (f64, usize)> = std::collections::HashMap::new();
    for (r, &i) in design.obs_index.iter().enumerate() {
        let o = &panel.observations()[i];
        let eta = probit.index(design.x.row(r));
        let e = imr_sum.entry(o.worker).or_insert((0.0, 0));
        e.0 += inverse_mills(eta);
        e.1 += 1;
    }
    let imr_bar: std::collections::HashMap<u32, f64> = imr_sum
        .iter()
        .map(|(&w, &(s, c))| (w, s / c as f64))
        .collect();

    // Outcome sample: comparable-private observations with prices.
    let (features, feature_names) = covariates.feature_matrix();
    let inst_feature = feature_names
        .iter()
        .position(|n| n == &cfg.instrument)
        .expect("instrument checked above");
    let skill_cols: Vec<usize> = (0..features.cols).filter(|&j| j != inst_feature).collect();

    let mut rows = Vec::new();
    for (i, o) in panel.observations().iter().enumerate() {
        if o.group != Group::Private || o.analysis_weight <= 0.0 {
            continue;
        }
        if covariates.row_of(panel.worker_id(o.worker)).is_none() {
            continue;
        }
        rows.push(i);
    }
    if rows.is_empty() {
        return Err(Error::invalid("heckman: empty outcome sample"));
    }
    let n = rows.len();
    let mut xf = Matrix::zeros(n, skill_cols.len());
    let mut y = Vec::with_capacity(n);
    let mut t_imr = Vec::with_capacity(n);
    let mut t_e = Vec::with_capacity(n);
    let mut t_e2 = Vec::with_capacity(n);
    let mut t_me = Vec::with_capacity(n);
    let mut t_me2 = Vec::with_capacity(n);
    let mut t_inst = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut row_worker = Vec::with_capacity(n);
    let mut provinces = Vec::with_capacity(n);
    let mut e_sum: std::collections::HashMap<u32, (f64, f64, usize)> =
        std::collections::HashMap::new();
    for &i in &rows {
        let o = &panel.observations()[i];
        let e = e_sum.entry(o.worker).or_insert((0.0, 0.0, 0));
        e.0 += o.experience;
        e.1 += o.experience * o.experience;
        e.2 += 1;
    }
    for (r, &i) in rows.iter().enumerate() {
        let o = &panel.observations()[i];
        let cov_row = covariates.row_of(panel.worker_id(o.worker)).unwrap();
        for (c, &j) in skill_cols.iter().enumerate() {
            xf[(r, c)] = features[(cov_row, j)];
        }
        y.push(o.log_wage - price.log_price_for(o.year)?);
        t_imr.push(imr_bar.get(&o.worker).copied().unwrap_or(0.0));
        t_e.push(o.experience);
        t_e2.push(o.experience * o.experience);
        let (se, se2, cnt) = e_sum[&o.worker];
        t_me.push(se / cnt as f64);
        t_me2.push(se2 / cnt as f64);
        t_inst.push(features[(cov_row, inst_feature)]);
        w.push(o.analysis_weight);
        row_worker.push(o.worker);
        provinces.push(o.province);
    }
    if weighted_var(&t_imr, &w) < 1e-12 {
        return Err(Error::ImrConstant);
    }

    let targets = vec![y, t_imr, t_e, t_e2, t_me, t_me2, t_inst];
    let (resid, fold_of_obs) = cross_fit_residuals(
        &xf,
        &row_worker,
        &targets,
        &w,
        &cfg.learner,
        cfg.cross_fit_folds,
        cfg.seed,
    )?;
    let [ry, rimr, re, re2, rme, rme2, rinst]: [Vec<f64>; 7] =
        resid.try_into().expect("seven targets");

    // Main outcome equation with province effects absorbed.
    let absorb_province = |col: &[f64]| -> Vec<f64> {
        let n_prov = provinces.iter().map(|&p| p as usize + 1).max().unwrap();
        let mut sum = vec![0.0; n_prov];
        let mut sw = vec![0.0; n_prov];
        for i in 0..col.len() {
            sum[provinces[i] as usize] += w[i] * col[i];
            sw[provinces[i] as usize] += w[i];
        }
        col.iter()
            .enumerate()
            .map(|(i, v)| v - sum[provinces[i] as usize] / sw[provinces[i] as usize])
            .collect()
    };
    let design_main = Matrix::from_columns(&[
        absorb_province(&rimr),
        absorb_province(&re),
        absorb_province(&re2),
        absorb_province(&rme),
        absorb_province(&rme2),
    ]);
    let y_main = absorb_province(&ry);
    let main_fit = wls(&design_main, &y_main, &w);
    let cov_main = cov_hc1(&design_main, &w, &main_fit.residuals, &main_fit.xtwx_inv, 5);
    let gamma = main_fit.coefs[0];
    let gamma_se = cov_main[(0, 0)].max(0.0).sqrt();
    let delta0 = main_fit.coefs[1];
    let delta1 = main_fit.coefs[2];
    let delta_se = (
        cov_main[(1, 1)].max(0.0).sqrt(),
        cov_main[(2, 2)].max(0.0).sqrt(),
    );

    // Exclusion test: does the instrument residual predict wages
    // conditional on the IMR? No province absorption here.
    let design_excl = Matrix::from_columns(&[
        rinst.clone(),
        rimr.clone(),
        re.clone(),
        re2.clone(),
        rme.clone(),
        rme2.clone(),
    ]);
    let excl_fit = wls(&design_excl, &ry, &w);
    let cov_excl = cov_hc1(&design_excl, &w, &excl_fit.residuals, &excl_fit.xtwx_inv, 6);
    let var_inst = cov_excl[(0, 0)].max(1e-300);
    let exclusion_wald = excl_fit.coefs[0] * excl_fit.coefs[0] / var_inst;
    let exclusion_p = chi2_1_sf(exclusion_wald);

    // Corrected skill signal: the baseline construction minus
    // gamma * worker-average IMR, then province-residualized.
    let mut per_worker: std::collections::HashMap<u32, (f64, usize, f64, u16, bool)> =
        std::collections::HashMap::new();
    for wk in 0..panel.n_workers() as u32 {
        let obs = panel.worker_obs(wk);
        let mut sum = 0.0;
        let mut cnt = 0usize;
        let mut wsum = 0.0;
        let mut prov = 0u16;
        let mut has_gov = false;
        for o in obs {
            if o.group == Group::Government {
                has_gov = true;
            }
            if o.group != Group::Private || o.analysis_weight <= 0.0 {
                continue;
            }
            let p = price.log_price_for(o.year)?;
            sum += o.log_wage - p - delta0 * o.experience - delta1 * o.experience * o.experience;
            wsum += o.analysis_weight;
            cnt += 1;
            prov = o.province;
        }
        if cnt == 0 || wsum <= 0.0 {
            continue;
        }
        let mut z = sum / cnt as f64;
        if let Some(&im) = imr_bar.get(&wk) {
            z -= gamma * im;
        }
        per_worker.insert(wk, (z, cnt, wsum / cnt as f64, prov, has_gov));
    }
    let mut signals: Vec<SkillSignal> = per_worker
        .into_iter()
        .map(|(wk, (z, cnt, weight, prov, mover))| SkillSignal {
            worker_id: panel.worker_id(wk).to_string(),
            zhat: z,
            n_years: cnt,
            province: prov,
            weight,
            mover,
        })
        .collect();
    signals.sort_by(|a, b| a.worker_id.cmp(&b.worker_id));
    let n_prov = signals.iter().map(|s| s.province as usize + 1).max().unwrap_or(1);
    let mut sum = vec![0.0; n_prov];
    let mut sw = vec![0.0; n_prov];
    for s in &signals {
        sum[s.province as usize] += s.weight * s.zhat;
        sw[s.province as usize] += s.weight;
    }
    for s in &mut signals {
        let p = s.province as usize;
        if sw[p] > 0.0 {
            s.zhat -= sum[p] / sw[p];
        }
    }

    Ok(HeckmanOutcome {
        probit,
        gamma_imr: gamma,
        gamma_se,
        delta0,
        delta1,
        delta_se,
        exclusion_wald,
        exclusion_p,
        corrected_signals: SkillSignals {
            signals,
            n_zero_weight_excluded: 0,
        },
        fold_of_obs,
    })
}
