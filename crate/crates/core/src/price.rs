//! Per-year skill price estimation.
//!
//! Baseline: flat-spot identification. Within-worker log wage changes for
//! workers whose experience midpoint lies in the flat-spot window carry
//! only price changes, so the weighted median (or mean) change per year
//! transition, accumulated over time, traces the log price path. Province
//! effects are removed by subtracting each province's deviation from the
//! overall weighted mean change within the transition, which preserves
//! the aggregate level. Confidence bands come from a clustered bootstrap
//! over workers and widen over time because the estimate is cumulative.
//!
//! Alternative: hedonic single-cross-section regression. Fit skills and
//! the experience profile on a base year, then read the price in every
//! other year off the weighted mean residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{wls, Matrix};
use crate::panel::{Group, Panel};
use crate::par;
use crate::rng::{substream, Domain};
use crate::stats::{weighted_mean, weighted_median};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriceStatistic {
    Median,
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatSpotConfig {
    /// Experience window; the text default is [22, 34], the figure-note
    /// variant [24, 36]. Both are supported, neither is privileged beyond
    /// this default.
    pub window: (f64, f64),
    pub statistic: PriceStatistic,
    pub bootstrap: usize,
    pub seed: u64,
    /// Spread non-adjacent within-worker changes (gap g years) as
    /// delta/g per intermediate transition. Off by default.
    pub use_gap_pairs: bool,
}

impl Default for FlatSpotConfig {
    fn default() -> Self {
        FlatSpotConfig {
            window: (22.0, 34.0),
            statistic: PriceStatistic::Median,
            bootstrap: 200,
            seed: 7,
            use_gap_pairs: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillPriceSeries {
    pub years: Vec<i32>,
    /// Accumulated log price, first entry exactly 0.
    pub log_price: Vec<f64>,
    /// exp(log_price), first entry exactly 1.
    pub price: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Bootstrap SD of the accumulated log price (0 when bootstrap off).
    pub boot_se: Vec<f64>,
    /// Flat-spot pairs entering the transition into each year (first = 0).
    pub n_flatspot_obs: Vec<usize>,
}

impl SkillPriceSeries {
    pub fn log_price_for(&self, year: i32) -> Result<f64> {
        self.years
            .iter()
            .position(|&y| y == year)
            .map(|i| self.log_price[i])
            .ok_or(Error::PriceYearMissing { year })
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record([
            "year",
            "log_price",
            "price",
            "ci_low",
            "ci_high",
            "boot_se",
            "n_flatspot_obs",
        ])?;
        for i in 0..self.years.len() {
            wtr.write_record([
                self.years[i].to_string(),
                self.log_price[i].to_string(),
                self.price[i].to_string(),
                self.ci_low[i].to_string(),
                self.ci_high[i].to_string(),
                self.boot_se[i].to_string(),
                self.n_flatspot_obs[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<SkillPriceSeries> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut s = SkillPriceSeries {
            years: vec![],
            log_price: vec![],
            price: vec![],
            ci_low: vec![],
            ci_high: vec![],
            boot_se: vec![],
            n_flatspot_obs: vec![],
        };
        for row in rdr.records() {
            let row = row?;
            let get = |i: usize| -> Result<f64> {
                row.get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::invalid("price csv: bad number"))
            };
            s.years.push(
                row.get(0)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::invalid("price csv: bad year"))?,
            );
            s.log_price.push(get(1)?);
            s.price.push(get(2)?);
            s.ci_low.push(get(3)?);
            s.ci_high.push(get(4)?);
            s.boot_se.push(get(5)?);
            s.n_flatspot_obs
                .push(row.get(6).unwrap_or("0").parse().unwrap_or(0));
        }
        Ok(s)
    }
}

/// One within-worker wage change eligible for a transition.
#[derive(Debug, Clone, Copy)]
struct PairRec {
    worker: u32,
    delta: f64,
    weight: f64,
    province: u16,
}

/// Estimation rows: private-group observations with positive analysis
/// weight.
fn comparable_obs(panel: &Panel) -> Vec<usize> {
    panel
        .observations()
        .iter()
        .enumerate()
        .filter(|(_, o)| o.group == Group::Private && o.analysis_weight > 0.0)
        .map(|(i, _)| i)
        .collect()
}

fn collect_pairs(panel: &Panel, cfg: &FlatSpotConfig, years: &[i32]) -> Vec<Vec<PairRec>> {
    let year_index: std::collections::HashMap<i32, usize> =
        years.iter().enumerate().map(|(i, &y)| (y, i)).collect();
    let n_transitions = years.len().saturating_sub(1);
    let mut pairs: Vec<Vec<PairRec>> = vec![Vec::new(); n_transitions];
    for w in 0..panel.n_workers() as u32 {
        let obs = panel.worker_obs(w);
        for k in 1..obs.len() {
            let (a, b) = (&obs[k - 1], &obs[k]);
            if a.group != Group::Private || b.group != Group::Private {
                continue;
            }
            if a.analysis_weight <= 0.0 || b.analysis_weight <= 0.0 {
                continue;
            }
            let gap = (b.year - a.year) as f64;
            if gap != 1.0 && !cfg.use_gap_pairs {
                continue;
            }
            let mid_e = 0.5 * (a.experience + b.experience);
            if mid_e < cfg.window.0 || mid_e > cfg.window.1 {
                continue;
            }
            let delta = (b.log_wage - a.log_wage) / gap;
            let weight = 0.5 * (a.analysis_weight + b.analysis_weight);
            for year in a.year..b.year {
                if let Some(&t) = year_index.get(&year) {
                    if t < n_transitions {
                        pairs[t].push(PairRec {
                            worker: w,
                            delta,
                            weight: weight / gap,
                            province: a.province,
                        });
                    }
                }
            }
        }
    }
    pairs
}

/// Per-transition price step: remove province deviations from the
/// overall weighted mean, then take the configured statistic. Weights
/// can be scaled per worker (bootstrap multiplicities).
fn transition_step(
    pairs: &[PairRec],
    statistic: PriceStatistic,
    multiplicity: Option<&[u32]>,
) -> Option<f64> {
    let mut deltas = Vec::with_capacity(pairs.len());
    let mut weights = Vec::with_capacity(pairs.len());
    let mut provinces = Vec::with_capacity(pairs.len());
    for p in pairs {
        let m = multiplicity.map(|m| m[p.worker as usize]).unwrap_or(1);
        if m == 0 {
            continue;
        }
        deltas.push(p.delta);
        weights.push(p.weight * m as f64);
        provinces.push(p.province);
    }
    if deltas.is_empty() {
        return None;
    }
    let overall = weighted_mean(&deltas, &weights);
    let n_prov = provinces.iter().copied().max().unwrap() as usize + 1;
    let mut prov_sum = vec![0.0; n_prov];
    let mut prov_w = vec![0.0; n_prov];
    for i in 0..deltas.len() {
        prov_sum[provinces[i] as usize] += weights[i] * deltas[i];
        prov_w[provinces[i] as usize] += weights[i];
    }
    let adjusted: Vec<f64> = (0..deltas.len())
        .map(|i| {
            let p = provinces[i] as usize;
            let prov_mean = prov_sum[p] / prov_w[p];
            deltas[i] - (prov_mean - overall)
        })
        .collect();
    Some(match statistic {
        PriceStatistic::Median => weighted_median(&adjusted, &weights),
        PriceStatistic::Mean => weighted_mean(&adjusted, &weights),
    })
}

fn accumulate(steps: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps.len() + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for s in steps {
        acc += s;
        out.push(acc);
    }
    out
}

pub fn flat_spot_price(panel: &Panel, cfg: &FlatSpotConfig) -> Result<SkillPriceSeries> {
    let mut years: Vec<i32> = comparable_obs(panel)
        .iter()
        .map(|&i| panel.observations()[i].year)
        .collect();
    years.sort_unstable();
    years.dedup();
    if years.is_empty() {
        return Err(Error::invalid("flat_spot_price: empty comparable sample"));
    }
    let pairs = collect_pairs(panel, cfg, &years);
    let mut steps = Vec::with_capacity(pairs.len());
    for (t, p) in pairs.iter().enumerate() {
        match transition_step(p, cfg.statistic, None) {
            Some(s) => steps.push(s),
            None => return Err(Error::SeriesGap { year: years[t + 1] }),
        }
    }
    let log_price = accumulate(&steps);

    let n_workers = panel.n_workers();
    let (ci_low, ci_high, boot_se) = if cfg.bootstrap > 0 && years.len() > 1 {
        let replicates: Vec<Vec<f64>> = par::map_indexed(cfg.bootstrap, |b| {
            let mut rng = substream(cfg.seed, Domain::BootstrapPrice, b as u64);
            use rand::Rng;
            let mut mult = vec![0u32; n_workers];
            for _ in 0..n_workers {
                mult[rng.random_range(0..n_workers)] += 1;
            }
            let steps: Vec<f64> = pairs
                .iter()
                .map(|p| transition_step(p, cfg.statistic, Some(&mult)).unwrap_or(0.0))
                .collect();
            accumulate(&steps)
        });
        percentile_bands(&replicates)
    } else {
        (
            log_price.iter().map(|l| l.exp()).collect(),
            log_price.iter().map(|l| l.exp()).collect(),
            vec![0.0; log_price.len()],
        )
    };

    let mut n_flatspot_obs = vec![0usize];
    n_flatspot_obs.extend(pairs.iter().map(|p| p.len()));
    Ok(SkillPriceSeries {
        price: log_price.iter().map(|l| l.exp()).collect(),
        years,
        log_price,
        ci_low,
        ci_high,
        boot_se,
        n_flatspot_obs,
    })
}

fn percentile_bands(replicates: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_years = replicates[0].len();
    let mut lo = Vec::with_capacity(n_years);
    let mut hi = Vec::with_capacity(n_years);
    let mut se = Vec::with_capacity(n_years);
    for t in 0..n_years {
        let mut vals: Vec<f64> = replicates.iter().map(|r| r[t]).collect();
        vals.sort_by(f64::total_cmp);
        let b = vals.len();
        let q = |p: f64| vals[((p * (b - 1) as f64).round() as usize).min(b - 1)];
        lo.push(q(0.025).exp());
        hi.push(q(0.975).exp());
        let mean: f64 = vals.iter().sum::<f64>() / b as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1).max(1) as f64;
        se.push(var.sqrt());
    }
    (lo, hi, se)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedonicLearner {
    /// Weighted OLS on all covariate features.
    Linear,
    /// Weighted OLS on the education dummy block only.
    EduOls,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HedonicConfig {
    pub learner: HedonicLearner,
    /// Defaults to the first panel year.
    pub base_year: Option<i32>,
}

impl Default for HedonicConfig {
    fn default() -> Self {
        HedonicConfig {
            learner: HedonicLearner::Linear,
            base_year: None,
        }
    }
}

/// Hedonic price series: fit wages on the base-year cross-section as
/// linear in (experience, experience^2, province dummies) plus a skill
/// term in the covariates, then for every year take the weighted mean of
/// `w - f(x) - h(e) - province effect` and normalize the first year to 0.
pub fn hedonic_price(
    panel: &Panel,
    covariates: &crate::panel::CovariateMatrix,
    cfg: &HedonicConfig,
) -> Result<SkillPriceSeries> {
    let rows = comparable_obs(panel);
    if rows.is_empty() {
        return Err(Error::invalid("hedonic_price: empty comparable sample"));
    }
    let mut years: Vec<i32> = rows.iter().map(|&i| panel.observations()[i].year).collect();
    years.sort_unstable();
    years.dedup();
    let base_year = cfg.base_year.unwrap_or(years[0]);
    if !years.contains(&base_year) {
        return Err(Error::invalid(format!(
            "hedonic_price: base year {base_year} not in panel"
        )));
    }

    let (features, feature_names) = covariates.feature_matrix();
    let skill_cols: Vec<usize> = match cfg.learner {
        HedonicLearner::Linear => (0..features.cols).collect(),
        HedonicLearner::EduOls => feature_names
            .iter()
            .enumerate()
            .filter(|(_, n)| covariates.education_names.contains(n))
            .map(|(j, _)| j)
            .collect(),
    };
    if skill_cols.is_empty() {
        return Err(Error::invalid("hedonic_price: no skill columns for learner"));
    }

    let n_prov = panel.provinces.len();
    // Design: intercept, e, e^2, province dummies (first as reference),
    // skill features.
    let k = 3 + n_prov.saturating_sub(1) + skill_cols.len();
    let base_rows: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&i| panel.observations()[i].year == base_year)
        .collect();
    let build_row = |i: usize, x: &mut [f64]| -> bool {
        let o = &panel.observations()[i];
        let Some(cov_row) = covariates.row_of(panel.worker_id(o.worker)) else {
            return false;
        };
        x[0] = 1.0;
        x[1] = o.experience;
        x[2] = o.experience * o.experience;
        for p in 1..n_prov {
            x[2 + p] = (o.province as usize == p) as u8 as f64;
        }
        for (c, &j) in skill_cols.iter().enumerate() {
            x[3 + n_prov - 1 + c] = features[(cov_row, j)];
        }
        true
    };

    let mut rows_built: Vec<Vec<f64>> = Vec::with_capacity(base_rows.len());
    let mut y = Vec::with_capacity(base_rows.len());
    let mut w = Vec::with_capacity(base_rows.len());
    for &i in &base_rows {
        let mut row = vec![0.0; k];
        if build_row(i, &mut row) {
            rows_built.push(row);
            y.push(panel.observations()[i].log_wage);
            w.push(panel.observations()[i].analysis_weight);
        }
    }
    if rows_built.is_empty() {
        return Err(Error::invalid(
            "hedonic_price: no base-year rows with covariates",
        ));
    }
    let mut design = Matrix::zeros(rows_built.len(), k);
    for (r, row) in rows_built.iter().enumerate() {
        design.row_mut(r).copy_from_slice(row);
    }
    let fit = wls(&design, &y, &w);

    // Residual means per year.
    let mut year_sum: std::collections::HashMap<i32, (f64, f64)> =
        std::collections::HashMap::new();
    let mut row = vec![0.0; k];
    for &i in &rows {
        let o = &panel.observations()[i];
        if !build_row(i, &mut row) {
            continue;
        }
        let pred: f64 = row.iter().zip(&fit.coefs).map(|(a, b)| a * b).sum();
        let r = o.log_wage - pred;
        let e = year_sum.entry(o.year).or_insert((0.0, 0.0));
        e.0 += o.analysis_weight * r;
        e.1 += o.analysis_weight;
    }
    let mut log_price: Vec<f64> = years
        .iter()
        .map(|y| {
            let (s, sw) = year_sum.get(y).copied().unwrap_or((0.0, 0.0));
            if sw > 0.0 {
                s / sw
            } else {
                0.0
            }
        })
        .collect();
    let first = log_price[0];
    for lp in &mut log_price {
        *lp -= first;
    }
    log_price[0] = 0.0;

    Ok(SkillPriceSeries {
        price: log_price.iter().map(|l| l.exp()).collect(),
        years: years.clone(),
        log_price,
        ci_low: vec![f64::NAN; years.len()],
        ci_high: vec![f64::NAN; years.len()],
        boot_se: vec![0.0; years.len()],
        n_flatspot_obs: vec![0; years.len()],
    })
}
