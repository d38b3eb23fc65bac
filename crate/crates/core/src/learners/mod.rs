//! Five-family skill prediction stage under one shared 10-fold
//! cross-validation harness: education-dummy OLS, a full basis-expansion
//! OLS, LASSO over a regularization path, random forest, and gradient
//! boosting. One `FoldAssignment` is consumed by every family; the grid
//! search is exhaustive with mean out-of-fold R^2 as the objective and
//! lexicographically-first tie-breaking; the winner is refit on the full
//! sample.

pub mod folds;
pub mod forest;
pub mod gbm;
pub mod lasso;
pub mod tree;

pub use folds::{make_folds, FoldAssignment};
pub use forest::{Forest, ForestParams, Mtry};
pub use gbm::{Gbm, GbmParams};
pub use lasso::LassoSearch;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{wls, Matrix};
use crate::panel::CovariateMatrix;
use crate::par;
use crate::profile::SkillSignals;
use crate::stats::weighted_r2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerFamily {
    EduOls,
    Basis,
    Lasso,
    RandomForest,
    Gbm,
}

impl LearnerFamily {
    pub fn all() -> [LearnerFamily; 5] {
        [
            LearnerFamily::EduOls,
            LearnerFamily::Basis,
            LearnerFamily::Lasso,
            LearnerFamily::RandomForest,
            LearnerFamily::Gbm,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LearnerFamily::EduOls => "edu_ols",
            LearnerFamily::Basis => "basis",
            LearnerFamily::Lasso => "lasso",
            LearnerFamily::RandomForest => "random_forest",
            LearnerFamily::Gbm => "gbm",
        }
    }

    pub fn parse(s: &str) -> Result<LearnerFamily> {
        match s {
            "edu_ols" => Ok(LearnerFamily::EduOls),
            "basis" => Ok(LearnerFamily::Basis),
            "lasso" => Ok(LearnerFamily::Lasso),
            "random_forest" | "rf" => Ok(LearnerFamily::RandomForest),
            "gbm" => Ok(LearnerFamily::Gbm),
            _ => Err(Error::invalid(format!("unknown learner family {s:?}"))),
        }
    }
}

/// Worker-level training table: one row per worker with the covariate
/// feature block, the skill signal as outcome, and the mean analysis
/// weight across the worker's contributing years.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub worker_ids: Vec<String>,
    pub x: Matrix,
    pub feature_names: Vec<String>,
    pub continuous_cols: Vec<usize>,
    pub education_cols: Vec<usize>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub n_years: Vec<usize>,
}

impl TrainingSet {
    pub fn from_signals(signals: &SkillSignals, covariates: &CovariateMatrix) -> Result<Self> {
        let (features, feature_names) = covariates.feature_matrix();
        let continuous_cols: Vec<usize> = (0..covariates.continuous_names.len()).collect();
        let education_cols: Vec<usize> = feature_names
            .iter()
            .enumerate()
            .filter(|(_, n)| covariates.education_names.contains(n))
            .map(|(j, _)| j)
            .collect();
        let mut worker_ids = Vec::new();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut n_years = Vec::new();
        for s in &signals.signals {
            let Some(r) = covariates.row_of(&s.worker_id) else {
                continue;
            };
            worker_ids.push(s.worker_id.clone());
            rows.push(r);
            y.push(s.zhat);
            w.push(s.weight);
            n_years.push(s.n_years);
        }
        if worker_ids.is_empty() {
            return Err(Error::invalid("training set empty: no signals with covariates"));
        }
        let mut x = Matrix::zeros(worker_ids.len(), features.cols);
        for (i, &r) in rows.iter().enumerate() {
            x.row_mut(i).copy_from_slice(features.row(r));
        }
        Ok(TrainingSet {
            worker_ids,
            x,
            feature_names,
            continuous_cols,
            education_cols,
            y,
            w,
            n_years,
        })
    }

    pub fn n(&self) -> usize {
        self.worker_ids.len()
    }

    /// Restrict to workers observed at least `m` years.
    pub fn filter_min_years(&self, m: usize) -> TrainingSet {
        let keep: Vec<usize> = (0..self.n()).filter(|&i| self.n_years[i] >= m).collect();
        let mut x = Matrix::zeros(keep.len(), self.x.cols);
        for (r, &i) in keep.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
        }
        TrainingSet {
            worker_ids: keep.iter().map(|&i| self.worker_ids[i].clone()).collect(),
            x,
            feature_names: self.feature_names.clone(),
            continuous_cols: self.continuous_cols.clone(),
            education_cols: self.education_cols.clone(),
            y: keep.iter().map(|&i| self.y[i]).collect(),
            w: keep.iter().map(|&i| self.w[i]).collect(),
            n_years: keep.iter().map(|&i| self.n_years[i]).collect(),
        }
    }
}

/// One term of a deterministic design expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisTerm {
    Linear(usize),
    Square(usize),
    Interaction(usize, usize),
}

/// How a model's design row is built from the raw feature row. Linear
/// terms come first in column order, then squares of continuous columns,
/// then all pairwise interactions (i < j) in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expansion {
    /// Selected raw columns.
    Columns(Vec<usize>),
    Terms(Vec<BasisTerm>),
}

impl Expansion {
    pub fn basis(p: usize, continuous: &[usize], squares: bool) -> Expansion {
        let mut terms: Vec<BasisTerm> = (0..p).map(BasisTerm::Linear).collect();
        if squares {
            for &j in continuous {
                terms.push(BasisTerm::Square(j));
            }
        }
        for i in 0..p {
            for j in (i + 1)..p {
                terms.push(BasisTerm::Interaction(i, j));
            }
        }
        Expansion::Terms(terms)
    }

    pub fn n_terms(&self) -> usize {
        match self {
            Expansion::Columns(c) => c.len(),
            Expansion::Terms(t) => t.len(),
        }
    }

    pub fn build_row(&self, features: &[f64], out: &mut [f64]) {
        match self {
            Expansion::Columns(cols) => {
                for (k, &j) in cols.iter().enumerate() {
                    out[k] = features[j];
                }
            }
            Expansion::Terms(terms) => {
                for (k, t) in terms.iter().enumerate() {
                    out[k] = match *t {
                        BasisTerm::Linear(j) => features[j],
                        BasisTerm::Square(j) => features[j] * features[j],
                        BasisTerm::Interaction(i, j) => features[i] * features[j],
                    };
                }
            }
        }
    }

    pub fn expand(&self, x: &Matrix, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.n_terms());
        let mut buf = vec![0.0; self.n_terms()];
        for (r, &i) in rows.iter().enumerate() {
            self.build_row(x.row(i), &mut buf);
            out.row_mut(r).copy_from_slice(&buf);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedState {
    Linear {
        expansion: Expansion,
        /// Intercept first, then one coefficient per expansion term.
        coefs: Vec<f64>,
    },
    Lasso {
        expansion: Expansion,
        means: Vec<f64>,
        sds: Vec<f64>,
        intercept: f64,
        coefs: Vec<f64>,
        lambda: f64,
    },
    Forest(Forest),
    Gbm(Gbm),
}

impl FittedState {
    pub fn predict_features(&self, features: &[f64]) -> f64 {
        match self {
            FittedState::Linear { expansion, coefs } => {
                let mut buf = vec![0.0; expansion.n_terms()];
                expansion.build_row(features, &mut buf);
                coefs[0]
                    + buf
                        .iter()
                        .zip(&coefs[1..])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            }
            FittedState::Lasso {
                expansion,
                means,
                sds,
                intercept,
                coefs,
                ..
            } => {
                let mut buf = vec![0.0; expansion.n_terms()];
                expansion.build_row(features, &mut buf);
                let mut pred = *intercept;
                for j in 0..buf.len() {
                    if coefs[j] != 0.0 && sds[j] > 0.0 {
                        pred += (buf[j] - means[j]) / sds[j] * coefs[j];
                    }
                }
                pred
            }
            FittedState::Forest(f) => f.predict_row(features),
            FittedState::Gbm(g) => g.predict_row(features),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub in_sample_r2: f64,
    /// Mean of per-fold out-of-fold R^2 (the reported statistic).
    pub oof_r2_mean: f64,
    /// Pooled R^2 over concatenated out-of-fold predictions.
    pub oof_r2_pooled: f64,
    pub fold_fingerprint: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerModel {
    pub family: LearnerFamily,
    pub hyperparams: serde_json::Value,
    pub fitted: FittedState,
    pub feature_names: Vec<String>,
    pub diagnostics: Diagnostics,
    /// Dropped collinear columns and similar fitting notes.
    pub notes: Vec<String>,
}

impl LearnerModel {
    pub fn predict_features(&self, features: &[f64]) -> f64 {
        self.fitted.predict_features(features)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<LearnerModel> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Hyperparameter grids; defaults follow the tuned search space
/// (forest: trees x mtry x min-node, gbm: depth x rate x bag x trees,
/// lasso: a 100-point log-spaced path chosen by out-of-fold R^2).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnGrids {
    pub forest: Vec<ForestParams>,
    pub gbm: Vec<GbmParams>,
    pub lasso: LassoSearch,
}

impl Default for LearnGrids {
    fn default() -> Self {
        let mut forest = Vec::new();
        for &n_trees in &[300usize, 500, 800] {
            for &mtry in &[Mtry::Sqrt, Mtry::Third, Mtry::Half] {
                for &min_node in &[5usize, 10] {
                    forest.push(ForestParams {
                        n_trees,
                        mtry,
                        min_node,
                    });
                }
            }
        }
        let mut gbm = Vec::new();
        for &depth in &[4usize, 6] {
            for &learning_rate in &[0.05, 0.1] {
                for &bag_fraction in &[0.6, 0.8] {
                    for &n_trees in &[200usize, 400] {
                        gbm.push(GbmParams {
                            depth,
                            learning_rate,
                            bag_fraction,
                            n_trees,
                        });
                    }
                }
            }
        }
        LearnGrids {
            forest,
            gbm,
            lasso: LassoSearch::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEval {
    pub label: String,
    pub per_fold_r2: Vec<f64>,
    pub mean_oof_r2: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedFamily {
    pub model: LearnerModel,
    pub search: Vec<ConfigEval>,
    /// Out-of-fold predictions of the selected configuration, aligned
    /// with the training rows.
    pub oof_predictions: Vec<f64>,
}

fn fit_linear_state(
    train: &TrainingSet,
    rows: &[usize],
    expansion: &Expansion,
    notes: &mut Vec<String>,
) -> FittedState {
    let expanded = expansion.expand(&train.x, rows);
    let mut cols = vec![vec![1.0; rows.len()]];
    for j in 0..expanded.cols {
        cols.push(expanded.column(j));
    }
    let design = Matrix::from_columns(&cols);
    let y: Vec<f64> = rows.iter().map(|&i| train.y[i]).collect();
    let w: Vec<f64> = rows.iter().map(|&i| train.w[i]).collect();
    let fit = wls(&design, &y, &w);
    if !fit.dropped.is_empty() {
        notes.push(format!(
            "dropped {} collinear expansion columns: {:?}",
            fit.dropped.len(),
            fit.dropped.iter().take(8).collect::<Vec<_>>()
        ));
    }
    FittedState::Linear {
        expansion: expansion.clone(),
        coefs: fit.coefs,
    }
}

fn predict_rows(state: &FittedState, train: &TrainingSet, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .map(|&i| state.predict_features(train.x.row(i)))
        .collect()
}

fn r2_or_nan(y: &[f64], yhat: &[f64], w: &[f64]) -> f64 {
    weighted_r2(y, yhat, w).unwrap_or(f64::NAN)
}

/// Salt so every (config, fold) pair draws its own tree substreams;
/// `fold = k` denotes the full-sample refit.
fn fit_salt(config_idx: usize, fold: usize) -> u64 {
    (config_idx as u64 + 1) * 1000 + fold as u64
}

struct GridOutcome {
    evals: Vec<ConfigEval>,
    oof_by_config: Vec<Vec<f64>>,
    best_idx: usize,
}

/// Exhaustive CV evaluation of `configs`, parallel over (config, fold).
/// Ties break to the earliest config in grid order, which enumerates the
/// hyperparameter tuples lexicographically.
fn evaluate_grid<F>(
    train: &TrainingSet,
    folds: &FoldAssignment,
    n_configs: usize,
    label: impl Fn(usize) -> String,
    fit_predict: F,
) -> Result<GridOutcome>
where
    F: Fn(usize, usize, &[usize], &[usize]) -> Vec<f64> + Sync + Send,
{
    if n_configs == 0 {
        return Err(Error::EmptyGrid);
    }
    let k = folds.k;
    let fold_rows: Vec<Vec<usize>> = (0..k).map(|f| folds.rows_in_fold(f)).collect();
    let train_rows: Vec<Vec<usize>> = (0..k).map(|f| folds.rows_not_in_fold(f)).collect();
    let preds: Vec<Vec<f64>> = par::map_indexed(n_configs * k, |idx| {
        let c = idx / k;
        let f = idx % k;
        fit_predict(c, f, &train_rows[f], &fold_rows[f])
    });
    let mut evals = Vec::with_capacity(n_configs);
    let mut oof_by_config = Vec::with_capacity(n_configs);
    for c in 0..n_configs {
        let mut oof = vec![f64::NAN; train.n()];
        let mut per_fold = Vec::with_capacity(k);
        for f in 0..k {
            let p = &preds[c * k + f];
            let rows = &fold_rows[f];
            for (j, &i) in rows.iter().enumerate() {
                oof[i] = p[j];
            }
            let y: Vec<f64> = rows.iter().map(|&i| train.y[i]).collect();
            let w: Vec<f64> = rows.iter().map(|&i| train.w[i]).collect();
            per_fold.push(r2_or_nan(&y, p, &w));
        }
        let mean = per_fold.iter().sum::<f64>() / k as f64;
        evals.push(ConfigEval {
            label: label(c),
            per_fold_r2: per_fold,
            mean_oof_r2: mean,
        });
        oof_by_config.push(oof);
    }
    let mut best_idx = 0;
    for c in 1..n_configs {
        if evals[c].mean_oof_r2 > evals[best_idx].mean_oof_r2 {
            best_idx = c;
        }
    }
    Ok(GridOutcome {
        evals,
        oof_by_config,
        best_idx,
    })
}

fn finalize(
    family: LearnerFamily,
    hyperparams: serde_json::Value,
    fitted: FittedState,
    train: &TrainingSet,
    folds: &FoldAssignment,
    outcome: GridOutcome,
    notes: Vec<String>,
) -> TrainedFamily {
    let all_rows: Vec<usize> = (0..train.n()).collect();
    let in_sample = predict_rows(&fitted, train, &all_rows);
    let in_sample_r2 = r2_or_nan(&train.y, &in_sample, &train.w);
    let oof = outcome.oof_by_config[outcome.best_idx].clone();
    let oof_r2_pooled = r2_or_nan(&train.y, &oof, &train.w);
    let model = LearnerModel {
        family,
        hyperparams,
        fitted,
        feature_names: train.feature_names.clone(),
        diagnostics: Diagnostics {
            in_sample_r2,
            oof_r2_mean: outcome.evals[outcome.best_idx].mean_oof_r2,
            oof_r2_pooled,
            fold_fingerprint: folds.fingerprint(),
        },
        notes,
    };
    TrainedFamily {
        model,
        search: outcome.evals,
        oof_predictions: oof,
    }
}

pub fn train_edu_ols(train: &TrainingSet, folds: &FoldAssignment) -> Result<TrainedFamily> {
    if train.education_cols.is_empty() {
        return Err(Error::invalid("train_edu_ols: no education dummy block"));
    }
    let expansion = Expansion::Columns(train.education_cols.clone());
    let mut notes = Vec::new();
    let outcome = evaluate_grid(train, folds, 1, |_| "edu_ols".into(), |_, _, tr, te| {
        let mut scratch = Vec::new();
        let state = fit_linear_state(train, tr, &expansion, &mut scratch);
        predict_rows(&state, train, te)
    })?;
    let all_rows: Vec<usize> = (0..train.n()).collect();
    let fitted = fit_linear_state(train, &all_rows, &expansion, &mut notes);
    Ok(finalize(
        LearnerFamily::EduOls,
        serde_json::json!({}),
        fitted,
        train,
        folds,
        outcome,
        notes,
    ))
}

pub fn train_basis(train: &TrainingSet, folds: &FoldAssignment) -> Result<TrainedFamily> {
    let expansion = Expansion::basis(train.x.cols, &train.continuous_cols, true);
    let mut notes = Vec::new();
    let outcome = evaluate_grid(train, folds, 1, |_| "basis".into(), |_, _, tr, te| {
        let mut scratch = Vec::new();
        let state = fit_linear_state(train, tr, &expansion, &mut scratch);
        predict_rows(&state, train, te)
    })?;
    let all_rows: Vec<usize> = (0..train.n()).collect();
    let fitted = fit_linear_state(train, &all_rows, &expansion, &mut notes);
    Ok(finalize(
        LearnerFamily::Basis,
        serde_json::json!({}),
        fitted,
        train,
        folds,
        outcome,
        notes,
    ))
}

/// LASSO on all variables plus pairwise interactions (no squares),
/// standardized, selecting the path point by mean out-of-fold R^2.
pub fn train_lasso(
    train: &TrainingSet,
    folds: &FoldAssignment,
    search: &LassoSearch,
) -> Result<TrainedFamily> {
    let expansion = Expansion::basis(train.x.cols, &[], false);
    let all_rows: Vec<usize> = (0..train.n()).collect();
    let full_expanded = expansion.expand(&train.x, &all_rows);
    let full_std = lasso::standardize(&full_expanded, &train.w);
    let lmax = lasso::lambda_max(&full_std, &train.y, &train.w);
    let lambdas = lasso::lambda_path(lmax, search);

    // Per fold: fit the whole path on the training rows (fold-local
    // standardization), predict every held-out row at every lambda.
    let k = folds.k;
    let fold_rows: Vec<Vec<usize>> = (0..k).map(|f| folds.rows_in_fold(f)).collect();
    let train_rows: Vec<Vec<usize>> = (0..k).map(|f| folds.rows_not_in_fold(f)).collect();
    let per_fold: Vec<Result<Vec<Vec<f64>>>> = par::map_indexed(k, |f| {
        let tr = &train_rows[f];
        let te = &fold_rows[f];
        let x_tr = expansion.expand(&train.x, tr);
        let y_tr: Vec<f64> = tr.iter().map(|&i| train.y[i]).collect();
        let w_tr: Vec<f64> = tr.iter().map(|&i| train.w[i]).collect();
        let std = lasso::standardize(&x_tr, &w_tr);
        let path = lasso::fit_path(&std, &y_tr, &w_tr, &lambdas, search)?;
        let x_te = expansion.expand(&train.x, te);
        let mut preds = Vec::with_capacity(path.len());
        for point in &path {
            let p: Vec<f64> = (0..te.len())
                .map(|r| {
                    let mut pred = point.intercept;
                    for j in 0..x_te.cols {
                        if point.coefs[j] != 0.0 && std.sds[j] > 0.0 {
                            pred += (x_te[(r, j)] - std.means[j]) / std.sds[j] * point.coefs[j];
                        }
                    }
                    pred
                })
                .collect();
            preds.push(p);
        }
        Ok(preds)
    });
    let mut fold_preds = Vec::with_capacity(k);
    for r in per_fold {
        fold_preds.push(r?);
    }

    let mut evals = Vec::with_capacity(lambdas.len());
    let mut oof_by_config = Vec::with_capacity(lambdas.len());
    for (li, &lambda) in lambdas.iter().enumerate() {
        let mut oof = vec![f64::NAN; train.n()];
        let mut per_fold_r2 = Vec::with_capacity(k);
        for f in 0..k {
            let rows = &fold_rows[f];
            let p = &fold_preds[f][li];
            for (j, &i) in rows.iter().enumerate() {
                oof[i] = p[j];
            }
            let y: Vec<f64> = rows.iter().map(|&i| train.y[i]).collect();
            let w: Vec<f64> = rows.iter().map(|&i| train.w[i]).collect();
            per_fold_r2.push(r2_or_nan(&y, p, &w));
        }
        let mean = per_fold_r2.iter().sum::<f64>() / k as f64;
        evals.push(ConfigEval {
            label: format!("lambda={lambda:.6e}"),
            per_fold_r2,
            mean_oof_r2: mean,
        });
        oof_by_config.push(oof);
    }
    let mut best_idx = 0;
    for c in 1..evals.len() {
        if evals[c].mean_oof_r2 > evals[best_idx].mean_oof_r2 {
            best_idx = c;
        }
    }

    let full_path = lasso::fit_path(
        &full_std,
        &train.y,
        &train.w,
        &lambdas[..=best_idx],
        search,
    )?;
    let chosen = full_path.last().unwrap();
    let fitted = FittedState::Lasso {
        expansion,
        means: full_std.means.clone(),
        sds: full_std.sds.clone(),
        intercept: chosen.intercept,
        coefs: chosen.coefs.clone(),
        lambda: chosen.lambda,
    };
    let outcome = GridOutcome {
        evals,
        oof_by_config,
        best_idx,
    };
    Ok(finalize(
        LearnerFamily::Lasso,
        serde_json::json!({"lambda": chosen.lambda, "n_lambda": search.n_lambda}),
        fitted,
        train,
        folds,
        outcome,
        Vec::new(),
    ))
}

pub fn train_random_forest(
    train: &TrainingSet,
    folds: &FoldAssignment,
    grid: &[ForestParams],
    seed: u64,
) -> Result<TrainedFamily> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let outcome = evaluate_grid(
        train,
        folds,
        grid.len(),
        |c| format!("{:?}", grid[c]),
        |c, f, tr, te| {
            let (x, y, w) = subset(train, tr);
            let forest = forest::fit_forest(&x, &y, &w, &grid[c], seed, fit_salt(c, f));
            te.iter()
                .map(|&i| forest.predict_row(train.x.row(i)))
                .collect()
        },
    )?;
    let best = grid[outcome.best_idx];
    let all_rows: Vec<usize> = (0..train.n()).collect();
    let (x, y, w) = subset(train, &all_rows);
    let forest = forest::fit_forest(&x, &y, &w, &best, seed, fit_salt(outcome.best_idx, folds.k));
    Ok(finalize(
        LearnerFamily::RandomForest,
        serde_json::to_value(best)?,
        FittedState::Forest(forest),
        train,
        folds,
        outcome,
        Vec::new(),
    ))
}

pub fn train_gbm(
    train: &TrainingSet,
    folds: &FoldAssignment,
    grid: &[GbmParams],
    seed: u64,
) -> Result<TrainedFamily> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let outcome = evaluate_grid(
        train,
        folds,
        grid.len(),
        |c| format!("{:?}", grid[c]),
        |c, f, tr, te| {
            let (x, y, w) = subset(train, tr);
            let model = gbm::fit_gbm(&x, &y, &w, &grid[c], seed, fit_salt(c, f));
            te.iter()
                .map(|&i| model.predict_row(train.x.row(i)))
                .collect()
        },
    )?;
    let best = grid[outcome.best_idx];
    let all_rows: Vec<usize> = (0..train.n()).collect();
    let (x, y, w) = subset(train, &all_rows);
    let model = gbm::fit_gbm(&x, &y, &w, &best, seed, fit_salt(outcome.best_idx, folds.k));
    Ok(finalize(
        LearnerFamily::Gbm,
        serde_json::to_value(best)?,
        FittedState::Gbm(model),
        train,
        folds,
        outcome,
        Vec::new(),
    ))
}

fn subset(train: &TrainingSet, rows: &[usize]) -> (Matrix, Vec<f64>, Vec<f64>) {
    let mut x = Matrix::zeros(rows.len(), train.x.cols);
    for (r, &i) in rows.iter().enumerate() {
        x.row_mut(r).copy_from_slice(train.x.row(i));
    }
    let y = rows.iter().map(|&i| train.y[i]).collect();
    let w = rows.iter().map(|&i| train.w[i]).collect();
    (x, y, w)
}

pub fn train_family(
    family: LearnerFamily,
    train: &TrainingSet,
    folds: &FoldAssignment,
    grids: &LearnGrids,
    seed: u64,
) -> Result<TrainedFamily> {
    match family {
        LearnerFamily::EduOls => train_edu_ols(train, folds),
        LearnerFamily::Basis => train_basis(train, folds),
        LearnerFamily::Lasso => train_lasso(train, folds, &grids.lasso),
        LearnerFamily::RandomForest => train_random_forest(train, folds, &grids.forest, seed),
        LearnerFamily::Gbm => train_gbm(train, folds, &grids.gbm, seed),
    }
}

/// Run every family on one shared fold assignment.
pub fn train_all_families(
    train: &TrainingSet,
    folds: &FoldAssignment,
    grids: &LearnGrids,
    seed: u64,
) -> Result<Vec<(LearnerFamily, TrainedFamily)>> {
    LearnerFamily::all()
        .into_iter()
        .map(|fam| train_family(fam, train, folds, grids, seed).map(|t| (fam, t)))
        .collect()
}

/// Out-of-sample prediction for any workers with matching covariate
/// schema. Pure function of the fitted state.
pub fn predict_skills(
    model: &LearnerModel,
    covariates: &CovariateMatrix,
) -> Result<Vec<(String, f64)>> {
    let (features, names) = covariates.feature_matrix();
    if names != model.feature_names {
        let mismatched: Vec<String> = names
            .iter()
            .filter(|n| !model.feature_names.contains(n))
            .chain(model.feature_names.iter().filter(|n| !names.contains(n)))
            .cloned()
            .collect();
        let listed = if mismatched.is_empty() {
            vec!["column order differs".to_string()]
        } else {
            mismatched
        };
        return Err(Error::SchemaMismatch(listed));
    }
    Ok(covariates
        .worker_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), model.predict_features(features.row(i))))
        .collect())
}

/// GBM variable importances by feature name, max normalized to 100.
pub fn variable_importance(model: &LearnerModel) -> Result<Vec<(String, f64)>> {
    let FittedState::Gbm(g) = &model.fitted else {
        return Err(Error::invalid("variable_importance: model is not a GBM"));
    };
    let imp = gbm::variable_importance(g, model.feature_names.len());
    Ok(model
        .feature_names
        .iter()
        .cloned()
        .zip(imp)
        .collect())
}

pub fn write_skills_csv(skills: &[(String, f64)], path: &std::path::Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["worker_id", "skill"])?;
    for (id, s) in skills {
        wtr.write_record([id.as_str(), &s.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_skills_csv(path: &std::path::Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        out.push((
            row.get(0).unwrap_or("").to_string(),
            row.get(1)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::invalid("skills csv: bad value"))?,
        ));
    }
    Ok(out)
}
