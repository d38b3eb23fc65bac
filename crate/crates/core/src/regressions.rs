//! Downstream weighted regression suite: the fixed-effect WLS engine and
//! the result tables built on it (wage informativeness, government wage
//! premium, gender gap, relative-skill series, cohort hiring, and the
//! stability diagnostics).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cov_cluster, cov_hc1, wls, Matrix};
use crate::panel::{Group, Panel};
use crate::profile::ProfileFit;
use crate::stats::{
    weighted_mean, weighted_pearson, weighted_quantile, weighted_spearman,
};

const ABSORB_TOL: f64 = 1e-10;
const ABSORB_MAX_SWEEPS: usize = 1000;

/// Column store for regression inputs.
#[derive(Debug, Clone)]
pub enum Col {
    Num(Vec<f64>),
    Cat { codes: Vec<u32>, labels: Vec<String> },
}

#[derive(Debug, Clone, Default)]
pub struct Frame {
    pub n: usize,
    cols: BTreeMap<String, Col>,
}

impl Frame {
    pub fn new(n: usize) -> Self {
        Frame {
            n,
            cols: BTreeMap::new(),
        }
    }

    pub fn add_num(&mut self, name: &str, values: Vec<f64>) {
        assert_eq!(values.len(), self.n, "column {name} length");
        self.cols.insert(name.to_string(), Col::Num(values));
    }

    pub fn add_cat(&mut self, name: &str, values: &[String]) {
        assert_eq!(values.len(), self.n, "column {name} length");
        let mut labels: Vec<String> = Vec::new();
        let mut lookup: HashMap<String, u32> = HashMap::new();
        let mut codes = Vec::with_capacity(values.len());
        for v in values {
            let code = match lookup.get(v) {
                Some(&c) => c,
                None => {
                    let c = labels.len() as u32;
                    labels.push(v.clone());
                    lookup.insert(v.clone(), c);
                    c
                }
            };
            codes.push(code);
        }
        self.cols
            .insert(name.to_string(), Col::Cat { codes, labels });
    }

    pub fn num(&self, name: &str) -> Result<&Vec<f64>> {
        match self.cols.get(name) {
            Some(Col::Num(v)) => Ok(v),
            _ => Err(Error::invalid(format!("no numeric column {name:?}"))),
        }
    }

    pub fn cat(&self, name: &str) -> Result<(&Vec<u32>, &Vec<String>)> {
        match self.cols.get(name) {
            Some(Col::Cat { codes, labels }) => Ok((codes, labels)),
            _ => Err(Error::invalid(format!("no categorical column {name:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Var(String),
    Interact(String, String),
}

impl Term {
    pub fn label(&self) -> String {
        match self {
            Term::Var(v) => v.clone(),
            Term::Interact(a, b) => format!("{a} x {b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeSpec {
    Iid,
    Hc1,
    Cluster(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub outcome: String,
    pub regressors: Vec<Term>,
    /// Categorical columns absorbed as fixed effects.
    pub fixed_effects: Vec<String>,
    pub weight: String,
    pub se: SeSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionFit {
    pub term_names: Vec<String>,
    pub coefs: Vec<f64>,
    pub ses: Vec<f64>,
    pub n_obs: usize,
    pub r2: f64,
    pub within_r2: Option<f64>,
    pub dropped: Vec<String>,
    pub n_singleton_clusters: usize,
}

impl RegressionFit {
    pub fn coef(&self, name: &str) -> Option<(f64, f64)> {
        self.term_names
            .iter()
            .position(|n| n == name)
            .map(|i| (self.coefs[i], self.ses[i]))
    }
}

/// Weighted multi-way fixed-effect demeaning by alternating projections.
fn absorb(cols: &mut [Vec<f64>], groups: &[&[u32]], w: &[f64]) -> Result<()> {
    if groups.is_empty() {
        return Ok(());
    }
    let sizes: Vec<usize> = groups
        .iter()
        .map(|g| g.iter().map(|&x| x as usize + 1).max().unwrap_or(0))
        .collect();
    for _ in 0..ABSORB_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for col in cols.iter_mut() {
            for (g, codes) in groups.iter().enumerate() {
                let mut sum = vec![0.0; sizes[g]];
                let mut sw = vec![0.0; sizes[g]];
                for i in 0..col.len() {
                    sum[codes[i] as usize] += w[i] * col[i];
                    sw[codes[i] as usize] += w[i];
                }
                for i in 0..col.len() {
                    let c = codes[i] as usize;
                    if sw[c] > 0.0 {
                        let m = sum[c] / sw[c];
                        col[i] -= m;
                        max_change = max_change.max(m.abs());
                    }
                }
            }
        }
        if max_change < ABSORB_TOL {
            return Ok(());
        }
    }
    Err(Error::NotConverged {
        what: "fixed-effect projection".into(),
        iterations: ABSORB_MAX_SWEEPS,
        criterion: ABSORB_TOL,
    })
}

/// Weighted OLS with absorbed fixed effects and IID/HC1/CR1 standard
/// errors. Rows with zero weight are excluded; collinear regressors are
/// dropped and reported.
pub fn weighted_ols_fe(spec: &RegressionSpec, frame: &Frame) -> Result<RegressionFit> {
    let weights_all = frame.num(&spec.weight)?;
    let rows: Vec<usize> = (0..frame.n).filter(|&i| weights_all[i] > 0.0).collect();
    if rows.len() < 2 {
        return Err(Error::invalid("weighted_ols_fe: fewer than 2 weighted rows"));
    }
    let w: Vec<f64> = rows.iter().map(|&i| weights_all[i]).collect();
    let y_raw_full = frame.num(&spec.outcome)?;
    let y_raw: Vec<f64> = rows.iter().map(|&i| y_raw_full[i]).collect();

    let mut term_names: Vec<String> = Vec::new();
    let mut x_cols: Vec<Vec<f64>> = Vec::new();
    let has_fe = !spec.fixed_effects.is_empty();
    if !has_fe {
        term_names.push("intercept".into());
        x_cols.push(vec![1.0; rows.len()]);
    }
    for term in &spec.regressors {
        let col = match term {
            Term::Var(v) => {
                let c = frame.num(v)?;
                rows.iter().map(|&i| c[i]).collect::<Vec<f64>>()
            }
            Term::Interact(a, b) => {
                let ca = frame.num(a)?;
                let cb = frame.num(b)?;
                rows.iter().map(|&i| ca[i] * cb[i]).collect()
            }
        };
        term_names.push(term.label());
        x_cols.push(col);
    }

    // Fixed-effect group codes per row (compacted).
    let mut group_codes: Vec<Vec<u32>> = Vec::new();
    let mut fe_levels = 0usize;
    for fe in &spec.fixed_effects {
        let (codes, _labels) = frame.cat(fe)?;
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let compact: Vec<u32> = rows
            .iter()
            .map(|&i| {
                let next = remap.len() as u32;
                *remap.entry(codes[i]).or_insert(next)
            })
            .collect();
        fe_levels += remap.len().saturating_sub(1);
        group_codes.push(compact);
    }

    let mut cols_for_absorb: Vec<Vec<f64>> = Vec::with_capacity(x_cols.len() + 1);
    cols_for_absorb.push(y_raw.clone());
    cols_for_absorb.extend(x_cols.iter().cloned());
    {
        let groups: Vec<&[u32]> = group_codes.iter().map(|g| g.as_slice()).collect();
        absorb(&mut cols_for_absorb, &groups, &w)?;
    }
    let y_d = cols_for_absorb.remove(0);
    let x = Matrix::from_columns(&cols_for_absorb);

    let fit = wls(&x, &y_d, &w);
    let dropped: Vec<String> = fit.dropped.iter().map(|&j| term_names[j].clone()).collect();

    let k_params = term_names.len() - dropped.len() + fe_levels + usize::from(has_fe);
    let (cov, n_singleton_clusters) = match &spec.se {
        SeSpec::Iid => {
            let sw: f64 = w.iter().sum();
            let sse: f64 = fit
                .residuals
                .iter()
                .zip(&w)
                .map(|(r, wi)| wi * r * r)
                .sum();
            let dof = (rows.len() as f64 - k_params as f64).max(1.0);
            let sigma2 = sse / sw * rows.len() as f64 / dof;
            let k = x.cols;
            let mut cov = Matrix::zeros(k, k);
            for a in 0..k {
                for b in 0..k {
                    cov[(a, b)] = sigma2 * fit.xtwx_inv[(a, b)];
                }
            }
            (cov, 0)
        }
        SeSpec::Hc1 => (
            cov_hc1(&x, &w, &fit.residuals, &fit.xtwx_inv, k_params),
            0,
        ),
        SeSpec::Cluster(by) => {
            let (codes, _) = frame.cat(by)?;
            let mut remap: HashMap<u32, usize> = HashMap::new();
            let clusters: Vec<usize> = rows
                .iter()
                .map(|&i| {
                    let next = remap.len();
                    *remap.entry(codes[i]).or_insert(next)
                })
                .collect();
            let n_clusters = remap.len();
            let mut counts = vec![0usize; n_clusters];
            for &c in &clusters {
                counts[c] += 1;
            }
            let singles = counts.iter().filter(|&&c| c == 1).count();
            (
                cov_cluster(&x, &w, &fit.residuals, &clusters, n_clusters, &fit.xtwx_inv, k_params),
                singles,
            )
        }
    };
    let ses: Vec<f64> = (0..x.cols).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();

    // R^2 on the raw outcome (fixed effects count as explained), within
    // R^2 on the demeaned outcome.
    let sw: f64 = w.iter().sum();
    let ybar = weighted_mean(&y_raw, &w);
    let mut sse = 0.0;
    let mut tss_raw = 0.0;
    let mut tss_within = 0.0;
    let ybar_d = weighted_mean(&y_d, &w);
    for i in 0..rows.len() {
        sse += w[i] * fit.residuals[i] * fit.residuals[i];
        tss_raw += w[i] * (y_raw[i] - ybar) * (y_raw[i] - ybar);
        tss_within += w[i] * (y_d[i] - ybar_d) * (y_d[i] - ybar_d);
    }
    let _ = sw;
    let r2 = if tss_raw > 0.0 { 1.0 - sse / tss_raw } else { f64::NAN };
    let within_r2 = if has_fe {
        Some(if tss_within > 0.0 {
            1.0 - sse / tss_within
        } else {
            f64::NAN
        })
    } else {
        None
    };

    Ok(RegressionFit {
        term_names,
        coefs: fit.coefs,
        ses,
        n_obs: rows.len(),
        r2,
        within_r2,
        dropped,
        n_singleton_clusters,
    })
}

/// One labeled column of a results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableColumn {
    pub label: String,
    pub fit: RegressionFit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTable {
    pub name: String,
    pub columns: Vec<TableColumn>,
}

impl RegressionTable {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["column", "term", "coef", "se", "n_obs", "r2", "within_r2"])?;
        for col in &self.columns {
            for (i, term) in col.fit.term_names.iter().enumerate() {
                wtr.write_record([
                    col.label.clone(),
                    term.clone(),
                    col.fit.coefs[i].to_string(),
                    col.fit.ses[i].to_string(),
                    col.fit.n_obs.to_string(),
                    col.fit.r2.to_string(),
                    col.fit
                        .within_r2
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Analysis rows: government + comparable-private worker-years with
/// predicted skills attached. Skills and the experience profile define
/// the life-cycle skill f(x) + h(e).
pub struct AnalysisInput<'a> {
    pub panel: &'a Panel,
    pub skills: &'a HashMap<String, f64>,
    pub profile: &'a ProfileFit,
    /// Age filter applied to government-side analyses (inclusive).
    pub age_range: (i32, i32),
}

pub const DEFAULT_AGE_RANGE: (i32, i32) = (25, 58);

fn base_frame(input: &AnalysisInput, groups: &[Group], apply_age_filter: bool) -> Frame {
    let panel = input.panel;
    let mut rows = Vec::new();
    for (i, o) in panel.observations().iter().enumerate() {
        if !groups.contains(&o.group) {
            continue;
        }
        if o.analysis_weight <= 0.0 {
            continue;
        }
        if apply_age_filter {
            let age = o.year - o.birth_year;
            if age < input.age_range.0 || age > input.age_range.1 {
                continue;
            }
        }
        if input.skills.contains_key(panel.worker_id(o.worker)) {
            rows.push(i);
        }
    }
    let n = rows.len();
    let mut frame = Frame::new(n);
    let obs = panel.observations();
    let mut log_wage = Vec::with_capacity(n);
    let mut experience = Vec::with_capacity(n);
    let mut experience_sq = Vec::with_capacity(n);
    let mut govt = Vec::with_capacity(n);
    let mut male = Vec::with_capacity(n);
    let mut skill = Vec::with_capacity(n);
    let mut lc_skill = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    let mut year_num = Vec::with_capacity(n);
    let mut year_cat = Vec::with_capacity(n);
    let mut occ = Vec::with_capacity(n);
    let mut sec = Vec::with_capacity(n);
    let mut cohort = Vec::with_capacity(n);
    let mut worker = Vec::with_capacity(n);
    let years = panel.years();
    let year_mid = (years[0] + years[years.len() - 1]) as f64 / 2.0;
    for &i in &rows {
        let o = &obs[i];
        let s = input.skills[panel.worker_id(o.worker)];
        log_wage.push(o.log_wage);
        experience.push(o.experience);
        experience_sq.push(o.experience * o.experience);
        govt.push((o.group == Group::Government) as u8 as f64);
        male.push(o.male as u8 as f64);
        skill.push(s);
        lc_skill.push(s + input.profile.h(o.experience));
        weight.push(o.analysis_weight);
        year_num.push(o.year as f64 - year_mid);
        year_cat.push(o.year.to_string());
        occ.push(panel.occupations.label(o.occupation).to_string());
        sec.push(panel.sectors.label(o.sector).to_string());
        cohort.push(o.birth_year as f64);
        worker.push(panel.worker_id(o.worker).to_string());
    }
    frame.add_num("log_wage", log_wage);
    frame.add_num("experience", experience);
    frame.add_num("experience_sq", experience_sq);
    frame.add_num("govt", govt);
    frame.add_num("male", male);
    frame.add_num("skill", skill);
    frame.add_num("life_cycle_skill", lc_skill);
    frame.add_num("weight", weight);
    frame.add_num("year_trend", year_num);
    frame.add_num("cohort", cohort);
    frame.add_cat("year", &year_cat);
    frame.add_cat("occupation", &occ);
    frame.add_cat("sector", &sec);
    frame.add_cat("worker", &worker);
    frame
}

/// Wage informativeness: skill-only / life-cycle-skill / skill+experience
/// regressions, separately for the government and comparable-private
/// samples (six columns, IID SEs).
pub fn informativeness_tables(input: &AnalysisInput) -> Result<RegressionTable> {
    let mut columns = Vec::new();
    for (sample, groups) in [
        ("government", vec![Group::Government]),
        ("comparable_private", vec![Group::Private]),
    ] {
        let frame = base_frame(input, &groups, false);
        let specs = [
            ("skill", vec![Term::Var("skill".into())]),
            ("life_cycle_skill", vec![Term::Var("life_cycle_skill".into())]),
            (
                "skill_experience",
                vec![
                    Term::Var("skill".into()),
                    Term::Var("experience".into()),
                    Term::Var("experience_sq".into()),
                ],
            ),
        ];
        for (label, regressors) in specs {
            let fit = weighted_ols_fe(
                &RegressionSpec {
                    outcome: "log_wage".into(),
                    regressors,
                    fixed_effects: vec![],
                    weight: "weight".into(),
                    se: SeSpec::Iid,
                },
                &frame,
            )?;
            columns.push(TableColumn {
                label: format!("{sample}:{label}"),
                fit,
            });
        }
    }
    Ok(RegressionTable {
        name: "informativeness".into(),
        columns,
    })
}

/// Government wage premium (eight columns) and the gender-gap table
/// (five columns), with year-clustered SEs wherever year effects enter.
pub fn premium_and_gender_tables(
    input: &AnalysisInput,
) -> Result<(RegressionTable, RegressionTable)> {
    let frame = base_frame(input, &[Group::Government, Group::Private], false);
    let govt = Term::Var("govt".into());
    let skill = Term::Var("skill".into());
    let lc = Term::Var("life_cycle_skill".into());
    let trend = Term::Interact("govt".into(), "year_trend".into());
    let year_fe = vec!["year".to_string()];
    let job_fe = vec!["year".to_string(), "occupation".to_string(), "sector".to_string()];
    let cluster = SeSpec::Cluster("year".into());

    let premium_specs: Vec<(&str, Vec<Term>, Vec<String>, SeSpec)> = vec![
        ("base", vec![govt.clone()], vec![], SeSpec::Iid),
        ("year_fe", vec![govt.clone()], year_fe.clone(), cluster.clone()),
        ("job_fe", vec![govt.clone()], job_fe.clone(), cluster.clone()),
        (
            "skill",
            vec![govt.clone(), skill.clone()],
            year_fe.clone(),
            cluster.clone(),
        ),
        (
            "skill_job",
            vec![govt.clone(), skill.clone()],
            job_fe.clone(),
            cluster.clone(),
        ),
        (
            "lc",
            vec![govt.clone(), lc.clone()],
            year_fe.clone(),
            cluster.clone(),
        ),
        (
            "lc_job",
            vec![govt.clone(), lc.clone()],
            job_fe.clone(),
            cluster.clone(),
        ),
        (
            "lc_trend",
            vec![govt.clone(), lc.clone(), trend.clone()],
            job_fe.clone(),
            cluster.clone(),
        ),
    ];
    let mut premium_cols = Vec::new();
    for (label, regressors, fixed_effects, se) in premium_specs {
        let fit = weighted_ols_fe(
            &RegressionSpec {
                outcome: "log_wage".into(),
                regressors,
                fixed_effects,
                weight: "weight".into(),
                se,
            },
            &frame,
        )?;
        premium_cols.push(TableColumn {
            label: label.into(),
            fit,
        });
    }

    let male = Term::Var("male".into());
    let gxm = Term::Interact("govt".into(), "male".into());
    let gender_specs: Vec<(&str, Vec<Term>, Vec<String>, SeSpec)> = vec![
        (
            "base",
            vec![govt.clone(), male.clone(), gxm.clone()],
            vec![],
            SeSpec::Iid,
        ),
        (
            "year_fe",
            vec![govt.clone(), male.clone(), gxm.clone()],
            year_fe.clone(),
            cluster.clone(),
        ),
        (
            "skill",
            vec![govt.clone(), male.clone(), gxm.clone(), skill.clone()],
            year_fe.clone(),
            cluster.clone(),
        ),
        (
            "lc",
            vec![govt.clone(), male.clone(), gxm.clone(), lc.clone()],
            year_fe.clone(),
            cluster.clone(),
        ),
        (
            "lc_trend",
            vec![govt.clone(), male.clone(), gxm.clone(), lc.clone(), trend],
            year_fe,
            cluster,
        ),
    ];
    let mut gender_cols = Vec::new();
    for (label, regressors, fixed_effects, se) in gender_specs {
        let fit = weighted_ols_fe(
            &RegressionSpec {
                outcome: "log_wage".into(),
                regressors,
                fixed_effects,
                weight: "weight".into(),
                se,
            },
            &frame,
        )?;
        gender_cols.push(TableColumn {
            label: label.into(),
            fit,
        });
    }

    Ok((
        RegressionTable {
            name: "premium".into(),
            columns: premium_cols,
        },
        RegressionTable {
            name: "gender_gap".into(),
            columns: gender_cols,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesBy {
    Year,
    CohortBin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelativeSkillSeries {
    pub cells: Vec<String>,
    pub relative: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub n_gov: Vec<usize>,
    pub n_comp: Vec<usize>,
    pub skipped_cells: Vec<String>,
}

impl RelativeSkillSeries {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["cell", "relative", "ci_low", "ci_high", "n_gov", "n_comp"])?;
        for i in 0..self.cells.len() {
            wtr.write_record([
                self.cells[i].clone(),
                self.relative[i].to_string(),
                self.ci_low[i].to_string(),
                self.ci_high[i].to_string(),
                self.n_gov[i].to_string(),
                self.n_comp[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub const DEFAULT_COHORT_BINS: usize = 15;

/// Job-composition-fixed government skills: residualize government
/// skills on occupation and sector (government-only regression), add
/// back the prediction at the reference job cell, then rescale
/// multiplicatively so the weighted government mean matches the raw one.
/// Non-government skills are untouched.
pub fn jobfix_skills(
    input: &AnalysisInput,
    reference: (&str, &str),
) -> Result<HashMap<String, f64>> {
    let panel = input.panel;
    // Worker-level government rows (modal job cell within worker-years).
    let mut rows: Vec<(String, f64, f64, u16, u16)> = Vec::new(); // id, skill, weight, occ, sec
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for o in panel.observations() {
        if o.group != Group::Government || o.analysis_weight <= 0.0 {
            continue;
        }
        let id = panel.worker_id(o.worker);
        let Some(&s) = input.skills.get(id) else {
            continue;
        };
        match seen.get(id) {
            Some(&idx) => {
                rows[idx].2 += o.analysis_weight;
            }
            None => {
                seen.insert(id, rows.len());
                rows.push((id.to_string(), s, o.analysis_weight, o.occupation, o.sector));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyCell("government".into()));
    }
    let occ_ref = panel
        .occupations
        .code(reference.0)
        .ok_or_else(|| Error::invalid(format!("reference occupation {:?} unknown", reference.0)))?;
    let sec_ref = panel
        .sectors
        .code(reference.1)
        .ok_or_else(|| Error::invalid(format!("reference sector {:?} unknown", reference.1)))?;

    let n_occ = panel.occupations.len();
    let n_sec = panel.sectors.len();
    let k = 1 + (n_occ - 1) + (n_sec - 1);
    let mut x = Matrix::zeros(rows.len(), k);
    let mut y = Vec::with_capacity(rows.len());
    let mut w = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        x[(r, 0)] = 1.0;
        for o in 1..n_occ {
            x[(r, o)] = (row.3 as usize == o) as u8 as f64;
        }
        for s in 1..n_sec {
            x[(r, n_occ - 1 + s)] = (row.4 as usize == s) as u8 as f64;
        }
        y.push(row.1);
        w.push(row.2);
    }
    let fit = wls(&x, &y, &w);
    let effect = |occ: u16, sec: u16| -> f64 {
        let mut v = 0.0;
        if occ as usize >= 1 {
            v += fit.coefs[occ as usize];
        }
        if sec as usize >= 1 {
            v += fit.coefs[n_occ - 1 + sec as usize];
        }
        v
    };
    let ref_effect = effect(occ_ref, sec_ref);
    let mut fixed: Vec<f64> = rows
        .iter()
        .map(|r| r.1 - effect(r.3, r.4) + ref_effect)
        .collect();
    let raw_mean = weighted_mean(&y, &w);
    let fix_mean = weighted_mean(&fixed, &w);
    if fix_mean.abs() > 1e-12 {
        let scale = raw_mean / fix_mean;
        for v in &mut fixed {
            *v *= scale;
        }
    }
    let mut out = input.skills.clone();
    for (r, row) in rows.iter().enumerate() {
        out.insert(row.0.clone(), fixed[r]);
    }
    Ok(out)
}

/// Relative skill series: weighted government mean minus comparison mean
/// of log skills by year or cohort bin, with normal CIs treating skills
/// as known.
pub fn relative_skill_series(
    input: &AnalysisInput,
    by: SeriesBy,
    skills: &HashMap<String, f64>,
) -> Result<RelativeSkillSeries> {
    let panel = input.panel;
    // (cell key, gov?, skill, weight)
    let mut rows: Vec<(i64, bool, f64, f64)> = Vec::new();
    let mut birth_years = Vec::new();
    let mut weights_all = Vec::new();
    for o in panel.observations() {
        if o.group == Group::Other || o.analysis_weight <= 0.0 {
            continue;
        }
        let age = o.year - o.birth_year;
        if age < input.age_range.0 || age > input.age_range.1 {
            continue;
        }
        let Some(&s) = skills.get(panel.worker_id(o.worker)) else {
            continue;
        };
        birth_years.push(o.birth_year as f64);
        weights_all.push(o.analysis_weight);
        let key = match by {
            SeriesBy::Year => o.year as i64,
            SeriesBy::CohortBin => o.birth_year as i64, // binned below
        };
        rows.push((key, o.group == Group::Government, s, o.analysis_weight));
    }
    if rows.is_empty() {
        return Err(Error::invalid("relative_skill_series: empty sample"));
    }
    // Cohort bins: equal weighted-count bins over birth years.
    if by == SeriesBy::CohortBin {
        let mut cuts = Vec::new();
        for b in 1..DEFAULT_COHORT_BINS {
            cuts.push(weighted_quantile(
                &birth_years,
                &weights_all,
                b as f64 / DEFAULT_COHORT_BINS as f64,
            ));
        }
        for r in &mut rows {
            let by_val = r.0 as f64;
            let bin = cuts.partition_point(|&c| c < by_val);
            r.0 = bin as i64;
        }
    }

    let mut cells: Vec<i64> = rows.iter().map(|r| r.0).collect();
    cells.sort_unstable();
    cells.dedup();
    let mut out = RelativeSkillSeries {
        cells: vec![],
        relative: vec![],
        ci_low: vec![],
        ci_high: vec![],
        n_gov: vec![],
        n_comp: vec![],
        skipped_cells: vec![],
    };
    for &cell in &cells {
        let mut gov: (f64, f64, f64, usize) = (0.0, 0.0, 0.0, 0); // sum, sw, sw2x centered later, n
        let mut comp = (0.0, 0.0, 0.0, 0);
        let subset: Vec<&(i64, bool, f64, f64)> = rows.iter().filter(|r| r.0 == cell).collect();
        for r in &subset {
            let t = if r.1 { &mut gov } else { &mut comp };
            t.0 += r.3 * r.2;
            t.1 += r.3;
            t.3 += 1;
        }
        if gov.3 == 0 || comp.3 == 0 {
            out.skipped_cells.push(cell.to_string());
            continue;
        }
        let mg = gov.0 / gov.1;
        let mc = comp.0 / comp.1;
        // Weighted-mean variance, treating skills as known.
        let mut vg = 0.0;
        let mut vc = 0.0;
        for r in &subset {
            if r.1 {
                vg += r.3 * r.3 * (r.2 - mg) * (r.2 - mg);
            } else {
                vc += r.3 * r.3 * (r.2 - mc) * (r.2 - mc);
            }
        }
        let se = (vg / (gov.1 * gov.1) + vc / (comp.1 * comp.1)).sqrt();
        let rel = mg - mc;
        out.cells.push(cell.to_string());
        out.relative.push(rel);
        out.ci_low.push(rel - 1.96 * se);
        out.ci_high.push(rel + 1.96 * se);
        out.n_gov.push(gov.3);
        out.n_comp.push(comp.3);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortTable {
    pub cohorts: Vec<i32>,
    pub ges: Vec<f64>,
    pub relative_skill: Vec<f64>,
    pub relative_skill_jobfix: Vec<f64>,
    pub n_gov_obs: Vec<usize>,
}

/// Cohort-level government employment share and relative skills,
/// filtered to cohorts with at least `min_gov_obs` government
/// observations inside the age window.
pub fn build_cohort_table(
    input: &AnalysisInput,
    jobfix: &HashMap<String, f64>,
    min_gov_obs: usize,
) -> Result<CohortTable> {
    let panel = input.panel;
    #[derive(Default)]
    struct Cell {
        gov_w: f64,
        all_w: f64,
        gov_skill: f64,
        gov_skill_w: f64,
        gov_skill_fix: f64,
        priv_skill: f64,
        priv_skill_w: f64,
        priv_skill_fix: f64,
        n_gov: usize,
    }
    let mut cells: BTreeMap<i32, Cell> = BTreeMap::new();
    for o in panel.observations() {
        if o.analysis_weight <= 0.0 {
            continue;
        }
        let age = o.year - o.birth_year;
        if age < input.age_range.0 || age > input.age_range.1 {
            continue;
        }
        let id = panel.worker_id(o.worker);
        let cell = cells.entry(o.birth_year).or_default();
        cell.all_w += o.analysis_weight;
        match o.group {
            Group::Government => {
                cell.gov_w += o.analysis_weight;
                if let (Some(&s), Some(&sf)) = (input.skills.get(id), jobfix.get(id)) {
                    cell.gov_skill += o.analysis_weight * s;
                    cell.gov_skill_fix += o.analysis_weight * sf;
                    cell.gov_skill_w += o.analysis_weight;
                    cell.n_gov += 1;
                }
            }
            Group::Private => {
                if let (Some(&s), Some(&sf)) = (input.skills.get(id), jobfix.get(id)) {
                    cell.priv_skill += o.analysis_weight * s;
                    cell.priv_skill_fix += o.analysis_weight * sf;
                    cell.priv_skill_w += o.analysis_weight;
                }
            }
            Group::Other => {}
        }
    }
    let mut out = CohortTable {
        cohorts: vec![],
        ges: vec![],
        relative_skill: vec![],
        relative_skill_jobfix: vec![],
        n_gov_obs: vec![],
    };
    for (cohort, c) in cells {
        if c.n_gov < min_gov_obs || c.gov_skill_w == 0.0 || c.priv_skill_w == 0.0 {
            continue;
        }
        out.cohorts.push(cohort);
        out.ges.push(c.gov_w / c.all_w);
        out.relative_skill
            .push(c.gov_skill / c.gov_skill_w - c.priv_skill / c.priv_skill_w);
        out.relative_skill_jobfix
            .push(c.gov_skill_fix / c.gov_skill_w - c.priv_skill_fix / c.priv_skill_w);
        out.n_gov_obs.push(c.n_gov);
    }
    Ok(out)
}

/// Six-column cohort hiring table: levels with a cubic cohort trend
/// (raw, jobfix), then first differences without/with the trend controls
/// (raw, raw, jobfix, jobfix). HC1 standard errors.
pub fn cohort_hiring_regression(table: &CohortTable) -> Result<RegressionTable> {
    let n = table.cohorts.len();
    if n < 10 {
        return Err(Error::TooFewCohorts {
            n_cohorts: n,
            min: 10,
        });
    }
    let c0 = table.cohorts.iter().map(|&c| c as f64).sum::<f64>() / n as f64;
    let trend: Vec<f64> = table.cohorts.iter().map(|&c| (c as f64 - c0) / 10.0).collect();

    let levels_frame = |skills: &[f64]| -> Frame {
        let mut f = Frame::new(n);
        f.add_num("rel", skills.to_vec());
        f.add_num("ges", table.ges.clone());
        f.add_num("t1", trend.clone());
        f.add_num("t2", trend.iter().map(|t| t * t).collect());
        f.add_num("t3", trend.iter().map(|t| t * t * t).collect());
        f.add_num("one", vec![1.0; n]);
        f
    };
    let diff = |v: &[f64]| -> Vec<f64> { (1..v.len()).map(|i| v[i] - v[i - 1]).collect() };
    let fd_frame = |skills: &[f64]| -> Frame {
        let m = n - 1;
        let mut f = Frame::new(m);
        f.add_num("rel", diff(skills));
        f.add_num("ges", diff(&table.ges));
        f.add_num("t1", trend[1..].to_vec());
        f.add_num("t2", trend[1..].iter().map(|t| t * t).collect());
        f.add_num("t3", trend[1..].iter().map(|t| t * t * t).collect());
        f.add_num("one", vec![1.0; m]);
        f
    };
    let trend_terms = || {
        vec![
            Term::Var("t1".into()),
            Term::Var("t2".into()),
            Term::Var("t3".into()),
        ]
    };
    let run = |frame: &Frame, with_trend: bool| -> Result<RegressionFit> {
        let mut regressors = vec![Term::Var("ges".into())];
        if with_trend {
            regressors.extend(trend_terms());
        }
        weighted_ols_fe(
            &RegressionSpec {
                outcome: "rel".into(),
                regressors,
                fixed_effects: vec![],
                weight: "one".into(),
                se: SeSpec::Hc1,
            },
            frame,
        )
    };
    let columns = vec![
        TableColumn {
            label: "level".into(),
            fit: run(&levels_frame(&table.relative_skill), true)?,
        },
        TableColumn {
            label: "level_jobfix".into(),
            fit: run(&levels_frame(&table.relative_skill_jobfix), true)?,
        },
        TableColumn {
            label: "fd".into(),
            fit: run(&fd_frame(&table.relative_skill), false)?,
        },
        TableColumn {
            label: "fd_trend".into(),
            fit: run(&fd_frame(&table.relative_skill), true)?,
        },
        TableColumn {
            label: "fd_jobfix".into(),
            fit: run(&fd_frame(&table.relative_skill_jobfix), false)?,
        },
        TableColumn {
            label: "fd_jobfix_trend".into(),
            fit: run(&fd_frame(&table.relative_skill_jobfix), true)?,
        },
    ];
    Ok(RegressionTable {
        name: "cohort_hiring".into(),
        columns,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub slope_through_origin: f64,
    /// (bin mean of baseline, bin mean of alternative), 10 weighted
    /// quantile bins of the alternative skill.
    pub binned_means: Vec<(f64, f64)>,
    pub n_compare: usize,
}

/// Agreement diagnostics between two skill measures over overlapping
/// workers: weighted Pearson/Spearman, the through-origin slope of the
/// centered alternative on the centered baseline, and 10 quantile-bin
/// means.
pub fn stability_compare(
    baseline: &HashMap<String, f64>,
    alternative: &HashMap<String, f64>,
    weights: &HashMap<String, f64>,
) -> Result<StabilityReport> {
    // Sort by worker id: map iteration order must not leak into float
    // accumulation order.
    let mut ids: Vec<&String> = baseline
        .keys()
        .filter(|id| alternative.contains_key(*id))
        .collect();
    ids.sort();
    let mut base = Vec::with_capacity(ids.len());
    let mut alt = Vec::with_capacity(ids.len());
    let mut w = Vec::with_capacity(ids.len());
    for id in ids {
        base.push(baseline[id]);
        alt.push(alternative[id]);
        w.push(weights.get(id).copied().unwrap_or(1.0));
    }
    if base.len() < 2 {
        return Err(Error::invalid("stability_compare: fewer than 2 overlapping workers"));
    }
    let pearson_r = weighted_pearson(&base, &alt, &w);
    let spearman_rho = weighted_spearman(&base, &alt, &w);
    let mb = weighted_mean(&base, &w);
    let ma = weighted_mean(&alt, &w);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..base.len() {
        num += w[i] * (base[i] - mb) * (alt[i] - ma);
        den += w[i] * (base[i] - mb) * (base[i] - mb);
    }
    let slope = num / den;

    // 10 weighted quantile bins of the centered alternative skill.
    let centered_alt: Vec<f64> = alt.iter().map(|a| a - ma).collect();
    let mut cuts = Vec::new();
    for b in 1..10 {
        cuts.push(weighted_quantile(&centered_alt, &w, b as f64 / 10.0));
    }
    let mut bin_sum = vec![(0.0f64, 0.0f64, 0.0f64); 10];
    for i in 0..base.len() {
        let bin = cuts.partition_point(|&c| c < centered_alt[i]);
        bin_sum[bin].0 += w[i] * (base[i] - mb);
        bin_sum[bin].1 += w[i] * centered_alt[i];
        bin_sum[bin].2 += w[i];
    }
    let binned_means = bin_sum
        .iter()
        .filter(|b| b.2 > 0.0)
        .map(|b| (b.0 / b.2, b.1 / b.2))
        .collect();
    Ok(StabilityReport {
        pearson_r,
        spearman_rho,
        slope_through_origin: slope,
        binned_means,
        n_compare: base.len(),
    })
}
