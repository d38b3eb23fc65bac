//! Direct density-ratio estimation via unconstrained least-squares
//! importance fitting (uLSIF) with Gaussian kernels, plus the
//! government-selection-rule report built on it.
//!
//! The ratio numerator sample supplies the kernel centers (first
//! `n_centers` of a seeded shuffle). The quadratic term averages kernel
//! products over the denominator sample, the linear term averages kernels
//! over the numerator, and a ridge-regularized solve gives the mixing
//! weights; negative fitted ratios clamp to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_sym, Matrix};
use crate::panel::{Group, Panel};
use crate::par;
use crate::rng::{shuffled_indices, substream, Domain};
use crate::stats::{weighted_quantile, weighted_var};

pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_MAX_CENTERS: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UlsifModel {
    pub centers: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
    pub alpha: Vec<f64>,
    /// Max-norm residual of the ridge system at the solution.
    pub system_residual: f64,
}

fn kernel(x: f64, c: f64, sigma: f64) -> f64 {
    let d = (x - c) / sigma;
    (-0.5 * d * d).exp()
}

/// Fit the ridge system for given centers. Returns None if the solver
/// had to drop columns (singular system).
fn solve_for_centers(
    centers: &[f64],
    numerator: &[f64],
    denominator: &[f64],
    sigma: f64,
    lambda: f64,
) -> Option<UlsifModel> {
    let b = centers.len();
    // H_{lm} = mean over denominator of K(x,c_l) K(x,c_m), accumulated
    // over row chunks in fixed order.
    let chunk = 2048;
    let n_chunks = denominator.len().div_ceil(chunk);
    let partials: Vec<Vec<f64>> = par::map_indexed(n_chunks, |ci| {
        let lo = ci * chunk;
        let hi = ((ci + 1) * chunk).min(denominator.len());
        let mut acc = vec![0.0; b * b];
        let mut kx = vec![0.0; b];
        for &x in &denominator[lo..hi] {
            for (l, &c) in centers.iter().enumerate() {
                kx[l] = kernel(x, c, sigma);
            }
            for l in 0..b {
                for m in l..b {
                    acc[l * b + m] += kx[l] * kx[m];
                }
            }
        }
        acc
    });
    let mut h_mat = Matrix::zeros(b, b);
    for acc in partials {
        for l in 0..b {
            for m in l..b {
                h_mat[(l, m)] += acc[l * b + m];
            }
        }
    }
    let nd = denominator.len() as f64;
    for l in 0..b {
        for m in l..b {
            let v = h_mat[(l, m)] / nd;
            h_mat[(l, m)] = v;
            h_mat[(m, l)] = v;
        }
    }
    for l in 0..b {
        h_mat[(l, l)] += lambda;
    }
    let mut h_vec = vec![0.0; b];
    for &x in numerator {
        for (l, &c) in centers.iter().enumerate() {
            h_vec[l] += kernel(x, c, sigma);
        }
    }
    let nn = numerator.len() as f64;
    for v in &mut h_vec {
        *v /= nn;
    }
    let solved = solve_sym(&h_mat, &h_vec, 1e-14);
    if !solved.dropped.is_empty() {
        return None;
    }
    // Residual check of (H + lambda I) alpha = h.
    let fitted = h_mat.matvec(&solved.solution);
    let residual = fitted
        .iter()
        .zip(&h_vec)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Some(UlsifModel {
        centers: centers.to_vec(),
        sigma,
        lambda,
        alpha: solved.solution,
        system_residual: residual,
    })
}

/// Fit uLSIF. Centers are the first `n_centers` entries of a seeded
/// shuffle of the numerator sample; a singular system triggers one
/// dedup-and-retry before erroring.
pub fn ulsif_fit(
    numerator: &[f64],
    denominator: &[f64],
    sigma: f64,
    lambda: f64,
    n_centers: usize,
    seed: u64,
) -> Result<UlsifModel> {
    if numerator.is_empty() || denominator.is_empty() {
        return Err(Error::invalid("ulsif_fit: empty sample"));
    }
    if n_centers == 0 || n_centers > numerator.len() {
        return Err(Error::invalid("ulsif_fit: need 1 <= n_centers <= numerator size"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("ulsif_fit: sigma must be positive"));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("ulsif_fit: lambda must be nonnegative"));
    }
    let mut rng = substream(seed, Domain::UlsifCenters, 0);
    let order = shuffled_indices(numerator.len(), &mut rng);
    let centers: Vec<f64> = order[..n_centers].iter().map(|&i| numerator[i]).collect();
    if let Some(m) = solve_for_centers(&centers, numerator, denominator, sigma, lambda) {
        return Ok(m);
    }
    // Deduplicate exact center values and retry once.
    let mut dedup = centers.clone();
    dedup.sort_by(f64::total_cmp);
    dedup.dedup();
    if dedup.len() < centers.len() {
        if let Some(m) = solve_for_centers(&dedup, numerator, denominator, sigma, lambda) {
            return Ok(m);
        }
    }
    Err(Error::SingularKernelSystem)
}

/// Fitted ratio at a point, clamped at zero.
pub fn density_ratio_at(model: &UlsifModel, z: f64) -> f64 {
    let s: f64 = model
        .centers
        .iter()
        .zip(&model.alpha)
        .map(|(&c, &a)| a * kernel(z, c, model.sigma))
        .sum();
    s.max(0.0)
}

/// K-fold cross-validation over (sigma, lambda) minimizing the held-out
/// uLSIF objective J = 0.5 a'H a - h'a (an affine transform of the
/// integrated squared ratio error).
pub fn ulsif_cv(
    numerator: &[f64],
    denominator: &[f64],
    sigmas: &[f64],
    lambdas: &[f64],
    n_centers: usize,
    k: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if sigmas.is_empty() || lambdas.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let fold_of = |n: usize, salt: u64| -> Vec<usize> {
        let mut rng = substream(seed, Domain::UlsifCenters, salt);
        let order = shuffled_indices(n, &mut rng);
        let mut f = vec![0usize; n];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % k;
        }
        f
    };
    let nu_fold = fold_of(numerator.len(), 1);
    let de_fold = fold_of(denominator.len(), 2);

    let mut best = (sigmas[0], lambdas[0]);
    let mut best_j = f64::INFINITY;
    for &sigma in sigmas {
        for &lambda in lambdas {
            let mut total_j = 0.0;
            let mut ok = true;
            for fold in 0..k {
                let nu_tr: Vec<f64> = numerator
                    .iter()
                    .zip(&nu_fold)
                    .filter(|(_, &f)| f != fold)
                    .map(|(&x, _)| x)
                    .collect();
                let de_tr: Vec<f64> = denominator
                    .iter()
                    .zip(&de_fold)
                    .filter(|(_, &f)| f != fold)
                    .map(|(&x, _)| x)
                    .collect();
                let nu_te: Vec<f64> = numerator
                    .iter()
                    .zip(&nu_fold)
                    .filter(|(_, &f)| f == fold)
                    .map(|(&x, _)| x)
                    .collect();
                let de_te: Vec<f64> = denominator
                    .iter()
                    .zip(&de_fold)
                    .filter(|(_, &f)| f == fold)
                    .map(|(&x, _)| x)
                    .collect();
                if nu_tr.is_empty() || de_tr.is_empty() || nu_te.is_empty() || de_te.is_empty() {
                    ok = false;
                    break;
                }
                let nc = n_centers.min(nu_tr.len());
                let Ok(model) = ulsif_fit(&nu_tr, &de_tr, sigma, lambda, nc, seed ^ fold as u64)
                else {
                    ok = false;
                    break;
                };
                // Held-out objective.
                let mut j = 0.0;
                for &x in &de_te {
                    let r: f64 = model
                        .centers
                        .iter()
                        .zip(&model.alpha)
                        .map(|(&c, &a)| a * kernel(x, c, sigma))
                        .sum();
                    j += 0.5 * r * r;
                }
                j /= de_te.len() as f64;
                let mut lin = 0.0;
                for &x in &nu_te {
                    let r: f64 = model
                        .centers
                        .iter()
                        .zip(&model.alpha)
                        .map(|(&c, &a)| a * kernel(x, c, sigma))
                        .sum();
                    lin += r;
                }
                j -= lin / nu_te.len() as f64;
                total_j += j;
            }
            if ok && total_j < best_j {
                best_j = total_j;
                best = (sigma, lambda);
            }
        }
    }
    Ok(best)
}

/// Weighted Gaussian kernel density with Silverman's bandwidth on the
/// effective sample size.
pub fn weighted_kde(points: &[f64], weights: &[f64], grid: &[f64]) -> Vec<f64> {
    let sw: f64 = weights.iter().sum();
    let sw2: f64 = weights.iter().map(|w| w * w).sum();
    let n_eff = if sw2 > 0.0 { sw * sw / sw2 } else { 1.0 };
    let sd = weighted_var(points, weights).sqrt();
    let bw = (1.06 * sd * n_eff.powf(-0.2)).max(1e-6);
    grid.iter()
        .map(|&g| {
            let mut acc = 0.0;
            for (&x, &w) in points.iter().zip(weights) {
                acc += w * kernel(g, x, bw);
            }
            acc / (sw * bw * (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRuleConfig {
    pub sigma: f64,
    pub lambda: f64,
    pub max_centers: usize,
    pub split_year: i32,
    pub grid_points: usize,
    pub seed: u64,
    /// Cross-validate (sigma, lambda) instead of using the fixed values.
    pub cv: bool,
}

impl Default for SelectionRuleConfig {
    fn default() -> Self {
        SelectionRuleConfig {
            sigma: DEFAULT_SIGMA,
            lambda: DEFAULT_LAMBDA,
            max_centers: DEFAULT_MAX_CENTERS,
            split_year: 2000,
            grid_points: 101,
            seed: 17,
            cv: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRuleReport {
    pub grid: Vec<f64>,
    /// Pooled government-vs-all ratio.
    pub rule: Vec<f64>,
    /// Workers entering the labor force in or before the split year.
    pub rule_pre: Vec<f64>,
    /// Workers entering after the split year.
    pub rule_post: Vec<f64>,
    pub dens_gov: Vec<f64>,
    pub dens_all: Vec<f64>,
    /// Survey-weighted KDE-ratio cross-check ("by hand").
    pub hand_ratio: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
}

impl SelectionRuleReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record([
            "z",
            "rule",
            "rule_pre",
            "rule_post",
            "dens_gov",
            "dens_all",
            "hand_ratio",
        ])?;
        for i in 0..self.grid.len() {
            wtr.write_record([
                self.grid[i].to_string(),
                self.rule[i].to_string(),
                self.rule_pre[i].to_string(),
                self.rule_post[i].to_string(),
                self.dens_gov[i].to_string(),
                self.dens_all[i].to_string(),
                self.hand_ratio[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

struct WorkerSkillRow {
    skill: f64,
    weight: f64,
    government: bool,
    entry_year: i32,
}

/// Selection rule: uLSIF ratio of the government skill distribution over
/// the all-worker distribution, pooled and split by labor-market entry
/// year, with weighted KDEs and a hand-built weighted ratio cross-check.
/// Skills are per-worker; a worker counts as government if any panel year
/// has a government observation.
pub fn selection_rule_report(
    skills: &[(String, f64)],
    panel: &Panel,
    cfg: &SelectionRuleConfig,
) -> Result<SelectionRuleReport> {
    let mut rows = Vec::new();
    for (id, skill) in skills {
        let Some(code) = panel.worker_code(id) else {
            continue;
        };
        let obs = panel.worker_obs(code);
        if obs.is_empty() {
            continue;
        }
        let government = obs.iter().any(|o| o.group == Group::Government);
        let first = &obs[0];
        let entry_year = first.year - first.experience.round() as i32;
        let weight = obs.iter().map(|o| o.survey_weight).sum::<f64>() / obs.len() as f64;
        rows.push(WorkerSkillRow {
            skill: *skill,
            weight,
            government,
            entry_year,
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("selection_rule_report: no matched workers"));
    }

    let all: Vec<f64> = rows.iter().map(|r| r.skill).collect();
    let all_w: Vec<f64> = rows.iter().map(|r| r.weight).collect();
    let gov: Vec<f64> = rows
        .iter()
        .filter(|r| r.government)
        .map(|r| r.skill)
        .collect();
    let gov_w: Vec<f64> = rows
        .iter()
        .filter(|r| r.government)
        .map(|r| r.weight)
        .collect();
    if gov.is_empty() {
        return Err(Error::EmptyCell("government".into()));
    }
    let cell = |pre: bool| -> (Vec<f64>, Vec<f64>) {
        let sel = |r: &&WorkerSkillRow| {
            if pre {
                r.entry_year <= cfg.split_year
            } else {
                r.entry_year > cfg.split_year
            }
        };
        let num = rows
            .iter()
            .filter(|r| r.government)
            .filter(sel)
            .map(|r| r.skill)
            .collect();
        let den = rows.iter().filter(sel).map(|r| r.skill).collect();
        (num, den)
    };
    let (gov_pre, all_pre) = cell(true);
    let (gov_post, all_post) = cell(false);
    for (name, v) in [
        ("government, entry <= split", &gov_pre),
        ("all, entry <= split", &all_pre),
        ("government, entry > split", &gov_post),
        ("all, entry > split", &all_post),
    ] {
        if v.is_empty() {
            return Err(Error::EmptyCell(name.into()));
        }
    }

    let (sigma, lambda) = if cfg.cv {
        ulsif_cv(
            &gov,
            &all,
            &[0.1, 0.2, 0.3, 0.5, 0.8],
            &[0.01, 0.05, 0.2, 1.0],
            cfg.max_centers.min(gov.len()),
            5,
            cfg.seed,
        )?
    } else {
        (cfg.sigma, cfg.lambda)
    };

    let fit = |num: &[f64], den: &[f64], salt: u64| -> Result<UlsifModel> {
        ulsif_fit(
            num,
            den,
            sigma,
            lambda,
            cfg.max_centers.min(num.len()),
            cfg.seed ^ salt,
        )
    };
    let pooled = fit(&gov, &all, 0)?;
    let pre = fit(&gov_pre, &all_pre, 1)?;
    let post = fit(&gov_post, &all_post, 2)?;

    let lo = weighted_quantile(&all, &all_w, 0.01);
    let hi = weighted_quantile(&all, &all_w, 0.99);
    let grid: Vec<f64> = (0..cfg.grid_points)
        .map(|i| lo + (hi - lo) * i as f64 / (cfg.grid_points - 1).max(1) as f64)
        .collect();

    let dens_gov = weighted_kde(&gov, &gov_w, &grid);
    let dens_all = weighted_kde(&all, &all_w, &grid);
    let hand_ratio: Vec<f64> = dens_gov
        .iter()
        .zip(&dens_all)
        .map(|(g, a)| if *a > 1e-12 { g / a } else { f64::NAN })
        .collect();

    Ok(SelectionRuleReport {
        rule: grid.iter().map(|&z| density_ratio_at(&pooled, z)).collect(),
        rule_pre: grid.iter().map(|&z| density_ratio_at(&pre, z)).collect(),
        rule_post: grid.iter().map(|&z| density_ratio_at(&post, z)).collect(),
        dens_gov,
        dens_all,
        hand_ratio,
        grid,
        sigma,
        lambda,
    })
}
