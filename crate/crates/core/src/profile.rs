//! Quadratic experience profile on price-adjusted wages with worker and
//! province fixed effects, and per-worker skill signals.
//!
//! The profile is estimated by two-way demeaning: worker effects are
//! absorbed exactly, province effects via alternating projections (a
//! no-op when workers never change province, since worker demeaning
//! already zeroes every province mean). Standard errors are clustered by
//! worker with the CR1 small-sample factor. The skill signal is each
//! worker's plain average of price- and profile-adjusted log wages over
//! their comparable-sample years, residualized on province.

use crate::error::{Error, Result};
use crate::linalg::{cov_cluster, wls, Matrix};
use crate::panel::{Group, Panel};
use crate::price::SkillPriceSeries;

const PROJECTION_TOL: f64 = 1e-10;
const PROJECTION_MAX_SWEEPS: usize = 1000;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProfileFit {
    pub delta0: f64,
    pub delta1: f64,
    pub cluster_se: (f64, f64),
    pub n_obs: usize,
    pub n_workers: usize,
    pub within_r2: f64,
}

impl ProfileFit {
    pub fn h(&self, e: f64) -> f64 {
        self.delta0 * e + self.delta1 * e * e
    }

    /// Experience at the fitted wage peak, -delta0 / (2 delta1).
    pub fn peak_experience(&self) -> Option<f64> {
        if self.delta1 != 0.0 {
            Some(-self.delta0 / (2.0 * self.delta1))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct SkillSignal {
    pub worker_id: String,
    pub zhat: f64,
    pub n_years: usize,
    pub province: u16,
    /// Worker-level analysis weight (mean across contributing years).
    pub weight: f64,
    /// Worker also appears in the government sample (only their
    /// comparable-private years contribute here).
    pub mover: bool,
}

#[derive(Debug, Clone)]
pub struct SkillSignals {
    pub signals: Vec<SkillSignal>,
    pub n_zero_weight_excluded: usize,
}

/// Estimation rows: comparable-private observations with positive
/// analysis weight and a price entry for their year.
fn estimation_rows(panel: &Panel, price: &SkillPriceSeries) -> Result<Vec<(usize, f64)>> {
    let mut rows = Vec::new();
    for (i, o) in panel.observations().iter().enumerate() {
        if o.group != Group::Private || o.analysis_weight <= 0.0 {
            continue;
        }
        let p = price.log_price_for(o.year)?;
        rows.push((i, o.log_wage - p));
    }
    Ok(rows)
}

/// Two-way (worker, province) alternating-projection demeaning of a set
/// of columns, weighted. Converges when the largest within-sweep change
/// drops below tolerance.
fn absorb_two_way(
    cols: &mut [Vec<f64>],
    worker: &[u32],
    province: &[u16],
    w: &[f64],
) -> Result<()> {
    let n = w.len();
    let n_workers = worker.iter().map(|&x| x as usize + 1).max().unwrap_or(0);
    let n_prov = province.iter().map(|&x| x as usize + 1).max().unwrap_or(0);
    for _sweep in 0..PROJECTION_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for col in cols.iter_mut() {
            // Worker pass.
            let mut sum = vec![0.0; n_workers];
            let mut sw = vec![0.0; n_workers];
            for i in 0..n {
                sum[worker[i] as usize] += w[i] * col[i];
                sw[worker[i] as usize] += w[i];
            }
            for i in 0..n {
                let g = worker[i] as usize;
                if sw[g] > 0.0 {
                    let m = sum[g] / sw[g];
                    col[i] -= m;
                    max_change = max_change.max(m.abs());
                }
            }
            // Province pass.
            let mut psum = vec![0.0; n_prov];
            let mut psw = vec![0.0; n_prov];
            for i in 0..n {
                psum[province[i] as usize] += w[i] * col[i];
                psw[province[i] as usize] += w[i];
            }
            for i in 0..n {
                let g = province[i] as usize;
                if psw[g] > 0.0 {
                    let m = psum[g] / psw[g];
                    col[i] -= m;
                    max_change = max_change.max(m.abs());
                }
            }
        }
        if max_change < PROJECTION_TOL {
            return Ok(());
        }
    }
    Err(Error::NotConverged {
        what: "two-way fixed-effect projection".into(),
        iterations: PROJECTION_MAX_SWEEPS,
        criterion: PROJECTION_TOL,
    })
}

/// Fit log(wage) - log(price) on (experience, experience^2) after
/// absorbing worker and province fixed effects, weighted by analysis
/// weights, with worker-clustered CR1 standard errors.
pub fn fit_within_quadratic(panel: &Panel, price: &SkillPriceSeries) -> Result<ProfileFit> {
    let rows = estimation_rows(panel, price)?;
    if rows.is_empty() {
        return Err(Error::invalid("fit_within_quadratic: empty sample"));
    }
    let n = rows.len();
    let mut y = Vec::with_capacity(n);
    let mut e1 = Vec::with_capacity(n);
    let mut e2 = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut worker = Vec::with_capacity(n);
    let mut province = Vec::with_capacity(n);
    for &(i, wtilde) in &rows {
        let o = &panel.observations()[i];
        y.push(wtilde);
        e1.push(o.experience);
        e2.push(o.experience * o.experience);
        w.push(o.analysis_weight);
        worker.push(o.worker);
        province.push(o.province);
    }
    // Dense worker codes for clustering.
    let mut code_map = std::collections::HashMap::new();
    let clusters: Vec<usize> = worker
        .iter()
        .map(|&wk| {
            let next = code_map.len();
            *code_map.entry(wk).or_insert(next)
        })
        .collect();
    let n_workers = code_map.len();

    let mut cols = vec![y, e1, e2];
    absorb_two_way(&mut cols, &worker, &province, &w)?;
    let [yd, e1d, e2d]: [Vec<f64>; 3] = cols.try_into().expect("three columns");

    let var_e1: f64 = e1d.iter().zip(&w).map(|(v, wi)| wi * v * v).sum();
    if var_e1 <= 1e-12 {
        return Err(Error::NoWithinVariation);
    }

    let x = Matrix::from_columns(&[e1d, e2d]);
    let fit = wls(&x, &yd, &w);
    let cov = cov_cluster(&x, &w, &fit.residuals, &clusters, n_workers, &fit.xtwx_inv, 2);

    let sw: f64 = w.iter().sum();
    let ybar: f64 = yd.iter().zip(&w).map(|(v, wi)| wi * v).sum::<f64>() / sw;
    let mut sse = 0.0;
    let mut tss = 0.0;
    for i in 0..yd.len() {
        sse += w[i] * fit.residuals[i] * fit.residuals[i];
        tss += w[i] * (yd[i] - ybar) * (yd[i] - ybar);
    }
    let within_r2 = if tss > 0.0 { 1.0 - sse / tss } else { 0.0 };

    Ok(ProfileFit {
        delta0: fit.coefs[0],
        delta1: fit.coefs[1],
        cluster_se: (cov[(0, 0)].max(0.0).sqrt(), cov[(1, 1)].max(0.0).sqrt()),
        n_obs: n,
        n_workers,
        within_r2,
    })
}

/// Per-worker mean of `w - p_t - h(e)` over comparable-private years,
/// residualized on province (analysis-weighted), with zero-weight workers
/// excluded and counted.
pub fn worker_mean_residual(
    panel: &Panel,
    price: &SkillPriceSeries,
    profile: &ProfileFit,
) -> Result<SkillSignals> {
    let mut signals = Vec::new();
    let mut n_zero = 0;
    for wk in 0..panel.n_workers() as u32 {
        let obs = panel.worker_obs(wk);
        let mut sum = 0.0;
        let mut n_years = 0usize;
        let mut wsum = 0.0;
        let mut province = None;
        let mut has_gov = false;
        for o in obs {
            if o.group == Group::Government {
                has_gov = true;
            }
            if o.group != Group::Private {
                continue;
            }
            let p = price.log_price_for(o.year)?;
            sum += o.log_wage - p - profile.h(o.experience);
            wsum += o.analysis_weight;
            n_years += 1;
            province = Some(o.province);
        }
        if n_years == 0 {
            continue;
        }
        if wsum <= 0.0 {
            n_zero += 1;
            continue;
        }
        signals.push(SkillSignal {
            worker_id: panel.worker_id(wk).to_string(),
            zhat: sum / n_years as f64,
            n_years,
            province: province.unwrap(),
            weight: wsum / n_years as f64,
            mover: has_gov,
        });
    }
    if signals.is_empty() {
        return Err(Error::invalid("worker_mean_residual: no usable workers"));
    }

    // Residualize on province: subtract analysis-weighted province means.
    let n_prov = signals.iter().map(|s| s.province as usize + 1).max().unwrap();
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

    Ok(SkillSignals {
        signals,
        n_zero_weight_excluded: n_zero,
    })
}

pub fn write_signals_csv(signals: &SkillSignals, path: &std::path::Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["worker_id", "zhat", "n_years", "weight", "mover"])?;
    for s in &signals.signals {
        wtr.write_record([
            s.worker_id.as_str(),
            &s.zhat.to_string(),
            &s.n_years.to_string(),
            &s.weight.to_string(),
            if s.mover { "1" } else { "0" },
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_signals_csv(path: &std::path::Path) -> Result<Vec<(String, f64, usize, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        out.push((
            row.get(0).unwrap_or("").to_string(),
            row.get(1)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::invalid("signals csv: bad zhat"))?,
            row.get(2).unwrap_or("0").parse().unwrap_or(0),
            row.get(3).unwrap_or("1").parse().unwrap_or(1.0),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::price::{flat_spot_price, FlatSpotConfig};
    use crate::stats::weighted_mean;
    use crate::synth::{generate, DgpConfig, GroupSpec, PricePath};

    fn flat_price_series(years: &[i32]) -> SkillPriceSeries {
        SkillPriceSeries {
            years: years.to_vec(),
            log_price: vec![0.0; years.len()],
            price: vec![1.0; years.len()],
            ci_low: vec![1.0; years.len()],
            ci_high: vec![1.0; years.len()],
            boot_se: vec![0.0; years.len()],
            n_flatspot_obs: vec![0; years.len()],
        }
    }

    fn noise_free_cfg(seed: u64) -> DgpConfig {
        DgpConfig {
            n_workers: 800,
            noise_sd: 0.0,
            projection_sd: 0.0,
            price: PricePath::Flat,
            delta0: 0.03,
            delta1: -0.0006,
            obs_rate: 0.8,
            group: GroupSpec {
                skill_coef: 0.0,
                other_frac: 0.0,
                ..GroupSpec::default()
            },
            seed,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn noise_free_profile_recovered_exactly() {
        let out = generate(&noise_free_cfg(3)).unwrap();
        let price = flat_price_series(&out.ground_truth.years);
        let fit = fit_within_quadratic(&out.panel, &price).unwrap();
        assert!((fit.delta0 - 0.03).abs() < 1e-8, "delta0 {}", fit.delta0);
        assert!((fit.delta1 + 0.0006).abs() < 1e-8, "delta1 {}", fit.delta1);
        assert!(fit.peak_experience().unwrap() > 0.0);
    }

    #[test]
    fn default_synthetic_recovers_profile_within_3_cluster_se() {
        // Stage isolation: feed the true price path so the only error in
        // (delta0, delta1) is the sampling error the cluster SEs measure.
        // First-stage price error is covered by the price-series checks.
        let cfg = DgpConfig {
            n_workers: 3000,
            seed: 19,
            group: GroupSpec {
                other_frac: 0.0,
                ..GroupSpec::default()
            },
            ..DgpConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let price = SkillPriceSeries {
            years: out.ground_truth.years.clone(),
            log_price: out.ground_truth.log_price.clone(),
            price: out.ground_truth.log_price.iter().map(|l| l.exp()).collect(),
            ci_low: vec![],
            ci_high: vec![],
            boot_se: vec![],
            n_flatspot_obs: vec![],
        };
        let fit = fit_within_quadratic(&out.panel, &price).unwrap();
        assert!(
            (fit.delta0 - cfg.delta0).abs() < 3.0 * fit.cluster_se.0,
            "delta0 {} vs {} (se {})",
            fit.delta0,
            cfg.delta0,
            fit.cluster_se.0
        );
        assert!(
            (fit.delta1 - cfg.delta1).abs() < 3.0 * fit.cluster_se.1,
            "delta1 {} vs {} (se {})",
            fit.delta1,
            cfg.delta1,
            fit.cluster_se.1
        );
    }

    #[test]
    fn profile_invariant_to_worker_constant_shift() {
        let out = generate(&noise_free_cfg(23)).unwrap();
        let price = flat_price_series(&out.ground_truth.years);
        let base = fit_within_quadratic(&out.panel, &price).unwrap();

        let mut shifted = out.panel.clone();
        let target = 0u32;
        for o in shifted.observations_mut() {
            if o.worker == target {
                o.log_wage += 1.7;
            }
        }
        let after = fit_within_quadratic(&shifted, &price).unwrap();
        assert!((base.delta0 - after.delta0).abs() < 1e-8);
        assert!((base.delta1 - after.delta1).abs() < 1e-8);
    }

    #[test]
    fn single_year_workers_error() {
        let mut cfg = noise_free_cfg(5);
        cfg.first_year = 2000;
        cfg.last_year = 2000;
        let out = generate(&cfg).unwrap();
        let price = flat_price_series(&[2000]);
        assert!(matches!(
            fit_within_quadratic(&out.panel, &price),
            Err(Error::NoWithinVariation)
        ));
    }

    #[test]
    fn noise_free_zhat_equals_province_demeaned_z() {
        let out = generate(&noise_free_cfg(7)).unwrap();
        let price = flat_price_series(&out.ground_truth.years);
        let fit = fit_within_quadratic(&out.panel, &price).unwrap();
        let signals = worker_mean_residual(&out.panel, &price, &fit).unwrap();
        let lookup = out.ground_truth.row_lookup();

        // Expected: z_i minus the analysis-weighted province mean of z
        // over signal workers.
        let n_prov = signals.signals.iter().map(|s| s.province as usize + 1).max().unwrap();
        let mut zsum = vec![0.0; n_prov];
        let mut zw = vec![0.0; n_prov];
        for s in &signals.signals {
            let z = out.ground_truth.z[lookup[s.worker_id.as_str()]];
            zsum[s.province as usize] += s.weight * z;
            zw[s.province as usize] += s.weight;
        }
        for s in &signals.signals {
            let z = out.ground_truth.z[lookup[s.worker_id.as_str()]];
            let expect = z - zsum[s.province as usize] / zw[s.province as usize];
            assert!(
                (s.zhat - expect).abs() < 1e-7,
                "zhat {} expect {expect}",
                s.zhat
            );
        }
        // Weighted mean of zhat ~ 0 after province demeaning.
        let zh: Vec<f64> = signals.signals.iter().map(|s| s.zhat).collect();
        let w: Vec<f64> = signals.signals.iter().map(|s| s.weight).collect();
        assert!(weighted_mean(&zh, &w).abs() < 1e-8);
    }

    #[test]
    fn zhat_noise_shrinks_with_more_years() {
        let cfg = DgpConfig {
            n_workers: 4000,
            seed: 77,
            group: GroupSpec {
                other_frac: 0.0,
                skill_coef: 0.0,
                ..GroupSpec::default()
            },
            ..DgpConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let price_cfg = FlatSpotConfig {
            bootstrap: 0,
            ..FlatSpotConfig::default()
        };
        let price = flat_spot_price(&out.panel, &price_cfg).unwrap();
        let fit = fit_within_quadratic(&out.panel, &price).unwrap();
        let signals = worker_mean_residual(&out.panel, &price, &fit).unwrap();
        let lookup = out.ground_truth.row_lookup();

        // Correlation of zhat with true z should rise with years observed.
        let corr_for = |min_years: usize, max_years: usize| -> f64 {
            let mut a = Vec::new();
            let mut b = Vec::new();
            let mut w = Vec::new();
            for s in &signals.signals {
                if s.n_years >= min_years && s.n_years <= max_years {
                    a.push(s.zhat);
                    b.push(out.ground_truth.z[lookup[s.worker_id.as_str()]]);
                    w.push(s.weight);
                }
            }
            crate::stats::weighted_pearson(&a, &b, &w)
        };
        let low = corr_for(1, 2);
        let high = corr_for(6, 100);
        assert!(
            high > low + 0.05,
            "corr with >=6 years {high} not above corr with <=2 years {low}"
        );
    }
}
