//! Synthetic worker-year panels with fully known ground truth.
//!
//! Wages follow the log-additive structure: price + quadratic experience
//! profile (+ optional worker-specific experience factor) + permanent
//! skill + noise. Skills decompose as `z_i = f0(x_i) + v_i`, with `f0`
//! evaluated on generated covariates, so every downstream stage can be
//! checked against stored truth. All draws come from per-worker
//! substreams: generation parallelizes over workers and is bit-identical
//! for a fixed `(config, seed)` on any thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Group, ObsRecord, Panel, PanelBuilder, RawCovariates, RawVariable, VarKind};
use crate::par;
use crate::rng::{draw_standard_normal, substream, Domain};
use crate::stats::normal_cdf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PricePath {
    /// Price constant at 1.
    Flat,
    /// Symmetric dip of `amplitude` log points at mid-panel; endpoints 0.
    UShape { amplitude: f64 },
    /// Explicit per-year multiplicative factors; first entry must be 1.
    Custom(Vec<f64>),
}

impl PricePath {
    fn log_path(&self, n_years: usize) -> Result<Vec<f64>> {
        match self {
            PricePath::Flat => Ok(vec![0.0; n_years]),
            PricePath::UShape { amplitude } => Ok((0..n_years)
                .map(|i| {
                    let x = if n_years > 1 {
                        i as f64 / (n_years - 1) as f64
                    } else {
                        0.0
                    };
                    -amplitude * 4.0 * x * (1.0 - x)
                })
                .collect()),
            PricePath::Custom(path) => {
                if path.len() != n_years {
                    return Err(Error::invalid(format!(
                        "price path has {} entries for {} years",
                        path.len(),
                        n_years
                    )));
                }
                if (path[0] - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid("price path must start at 1"));
                }
                if path.iter().any(|p| !(*p > 0.0)) {
                    return Err(Error::invalid("price factors must be positive"));
                }
                Ok(path.iter().map(|p| p.ln()).collect())
            }
        }
    }
}

/// True mapping from covariates to expected skill.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F0Spec {
    /// Linear in named features.
    Linear { coefs: Vec<(String, f64)> },
    /// Education dummies only.
    EducationOnly { coefs: [f64; 5] },
    /// Smooth nonlinear terms plus one education-score interaction;
    /// detectable by trees, not exactly representable by OLS.
    AdditiveNonlinear,
    /// Pure two-score interaction.
    InteractionOnly { coef: f64 },
}

/// Covariate block layout. Continuous scores are standard-normal-ish and
/// correlated with a latent ability that also orders education.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateGenSpec {
    pub n_scores: usize,
    pub n_flags: usize,
    /// Per-cell missingness probability for scores and flags.
    pub missing_rate: f64,
}

impl Default for CovariateGenSpec {
    fn default() -> Self {
        CovariateGenSpec {
            n_scores: 6,
            n_flags: 4,
            missing_rate: 0.0,
        }
    }
}

/// Worker-level government/private/other assignment used when no
/// selection model is active. Membership follows a logistic index in
/// entry-age demographics, job cells, and (optionally) skill components,
/// so both the propensity logit and the density-ratio stages have
/// well-defined targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSpec {
    pub intercept: f64,
    pub male_coef: f64,
    /// Applied to (entry age - 21).
    pub entry_age_coef: f64,
    pub occupation_effects: Vec<f64>,
    pub sector_effects: Vec<f64>,
    /// Weight on the observable skill component f0(x).
    pub skill_coef: f64,
    /// Weight on total skill z (observable + projection error); use for
    /// selection-on-z shapes in the density-ratio exercises.
    pub latent_coef: f64,
    /// Quadratic opt-out above this z threshold ("most skilled decline").
    pub optout_threshold: f64,
    pub optout_strength: f64,
    /// Share of non-government workers assigned to the residual "other"
    /// group (self-employed and similar; excluded by the sample filter).
    pub other_frac: f64,
}

impl Default for GroupSpec {
    fn default() -> Self {
        GroupSpec {
            intercept: -1.6,
            male_coef: 0.3,
            entry_age_coef: 0.02,
            occupation_effects: vec![0.8, 0.3, -0.4, -0.8, 0.1],
            sector_effects: vec![0.5, -0.2, -0.6, 0.2],
            skill_coef: 0.8,
            latent_coef: 0.0,
            optout_threshold: f64::INFINITY,
            optout_strength: 0.0,
            other_frac: 0.25,
        }
    }
}

/// Government wage-setting rule layered on the private-sector equation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GovWageSpec {
    /// Additive log premium for government observations.
    pub premium: f64,
    /// Premium trend per year since the first panel year.
    pub premium_trend: f64,
    /// Loading on z in government wages (1 = same as private).
    pub z_loading: f64,
    /// Male log premium inside government.
    pub male_gap: f64,
    /// If set, government wages follow a rigid tenure schedule
    /// `a + b * experience` instead of price + profile + skill.
    pub rigid_tenure: Option<(f64, f64)>,
}

impl Default for GovWageSpec {
    fn default() -> Self {
        GovWageSpec {
            premium: 0.0,
            premium_trend: 0.0,
            z_loading: 1.0,
            male_gap: 0.0,
            rigid_tenure: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct WageStructure {
    /// Male log premium in private-sector wages.
    pub male_gap_private: f64,
    #[serde(default)]
    pub gov: GovWageSpec,
}

/// Heckman-style selection into the comparable-private sample:
/// `P(s=1) = Phi(g(x) + h(e) + beta_r * r + pi_t)` with the probit shock
/// correlated (rho) with the wage shock. Selected observations land in
/// the private group, the rest in government.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub g_intercept: f64,
    /// Coefficients on named covariate features.
    pub g_coefs: Vec<(String, f64)>,
    /// Include the true h(e) in the selection index.
    pub use_experience: bool,
    pub beta_r: f64,
    /// P(r_i = 1): the worker-level binary instrument ("parent ever in a
    /// comparable private-sector job").
    pub instrument_rate: f64,
    /// Direct wage effect of the instrument (0 under a valid exclusion
    /// restriction; nonzero to study the exclusion test's power).
    pub instrument_wage_effect: f64,
    /// Correlation between the selection shock and the wage shock.
    pub rho: f64,
    /// Optional per-year effects pi_t (aligned to panel years).
    pub year_effects: Option<Vec<f64>>,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        SelectionSpec {
            g_intercept: 0.3,
            g_coefs: vec![("score_0".into(), 0.3), ("edu_higher".into(), 0.4)],
            use_experience: false,
            beta_r: 0.3,
            instrument_rate: 0.3,
            instrument_wage_effect: 0.0,
            rho: 0.0,
            year_effects: None,
        }
    }
}

/// Experience-factor extension: wage gains `g_i * delta_e[e]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorSpec {
    /// g_i ~ lognormal(mu, sd) when sd > 0; constant exp(mu) otherwise.
    pub g_log_mean: f64,
    pub g_log_sd: f64,
    pub delta_e: DeltaPath,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaPath {
    Quadratic { delta0: f64, delta1: f64 },
    Custom(Vec<f64>),
}

impl DeltaPath {
    pub fn at(&self, e: usize) -> f64 {
        match self {
            DeltaPath::Quadratic { delta0, delta1 } => {
                let ef = e as f64;
                delta0 * ef + delta1 * ef * ef
            }
            DeltaPath::Custom(v) => *v.get(e).unwrap_or(v.last().unwrap_or(&0.0)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_workers: usize,
    pub first_year: i32,
    pub last_year: i32,
    pub f0: F0Spec,
    pub price: PricePath,
    pub delta0: f64,
    pub delta1: f64,
    pub noise_sd: f64,
    pub projection_sd: f64,
    #[serde(default)]
    pub covariates: CovariateGenSpec,
    /// Entry years are uniform over `[first_year - entry_spread,
    /// first_year + late_entry_window]`, with experience 0 at entry;
    /// staggered entry keeps experience and calendar time from being
    /// collinear and guarantees flat-spot coverage.
    pub entry_spread: i32,
    /// Defaults to the panel length; zero (with zero spread) gives a
    /// balanced panel where everyone enters in the first year.
    #[serde(default)]
    pub late_entry_window: Option<i32>,
    /// Probability a worker-year inside the window is observed.
    pub obs_rate: f64,
    #[serde(default)]
    pub group: GroupSpec,
    #[serde(default)]
    pub wage: WageStructure,
    #[serde(default)]
    pub selection: Option<SelectionSpec>,
    #[serde(default)]
    pub factor: Option<FactorSpec>,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_workers: 2000,
            first_year: 1990,
            last_year: 2009,
            f0: F0Spec::AdditiveNonlinear,
            price: PricePath::UShape { amplitude: 0.15 },
            // Concave profile peaking at 28 years, the middle of the
            // default flat-spot window, so window growth averages zero.
            delta0: 0.028,
            delta1: -0.0005,
            noise_sd: 0.30,
            projection_sd: 0.25,
            covariates: CovariateGenSpec::default(),
            entry_spread: 40,
            late_entry_window: None,
            obs_rate: 0.5,
            group: GroupSpec::default(),
            wage: WageStructure::default(),
            selection: None,
            factor: None,
            seed: 20240501,
        }
    }
}

impl DgpConfig {
    pub fn n_years(&self) -> usize {
        (self.last_year - self.first_year + 1) as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_workers == 0 {
            return Err(Error::invalid("n_workers must be positive"));
        }
        if self.last_year < self.first_year {
            return Err(Error::invalid("last_year before first_year"));
        }
        if self.noise_sd < 0.0 || self.projection_sd < 0.0 {
            return Err(Error::invalid("noise SDs must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.obs_rate) || self.obs_rate == 0.0 {
            return Err(Error::invalid("obs_rate must be in (0, 1]"));
        }
        if let Some(sel) = &self.selection {
            if sel.rho.abs() >= 1.0 {
                return Err(Error::invalid("selection rho must satisfy |rho| < 1"));
            }
            if let Some(pi) = &sel.year_effects {
                if pi.len() != self.n_years() {
                    return Err(Error::invalid("selection year_effects length mismatch"));
                }
            }
        }
        Ok(())
    }
}

/// Per-worker selection record in the truth set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionTruth {
    pub beta_r: f64,
    pub rho: f64,
    pub instrument_wage_effect: f64,
}

/// Everything an oracle needs: skill components per worker, the price
/// path, profile parameters, selection parameters, and the realized wage
/// noise aligned with the panel rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub worker_ids: Vec<String>,
    pub z: Vec<f64>,
    pub f0: Vec<f64>,
    pub v: Vec<f64>,
    pub g: Option<Vec<f64>>,
    pub instrument: Option<Vec<u8>>,
    pub years: Vec<i32>,
    pub log_price: Vec<f64>,
    pub delta0: f64,
    pub delta1: f64,
    pub delta_e: Option<Vec<f64>>,
    pub selection: Option<SelectionTruth>,
    pub wage: WageStructure,
    /// Realized wage shocks, aligned with the panel's observation order.
    pub noise: Vec<f64>,
}

impl GroundTruth {
    pub fn log_price_for(&self, year: i32) -> f64 {
        let idx = self.years.iter().position(|&y| y == year).expect("year");
        self.log_price[idx]
    }

    pub fn h(&self, e: f64) -> f64 {
        self.delta0 * e + self.delta1 * e * e
    }

    /// Map worker id to the row index in the truth arrays. Panel worker
    /// codes do not line up with truth rows (workers can go unobserved),
    /// so oracle code must join through ids.
    pub fn row_lookup(&self) -> std::collections::HashMap<&str, usize> {
        self.worker_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Truth rows aligned with a panel's worker codes.
    pub fn rows_for_panel(&self, panel: &Panel) -> Vec<usize> {
        let lookup = self.row_lookup();
        panel
            .worker_ids()
            .iter()
            .map(|id| lookup[id.as_str()])
            .collect()
    }
}

pub struct SynthOutput {
    pub panel: Panel,
    pub raw_covariates: RawCovariates,
    pub ground_truth: GroundTruth,
}

struct WorkerDraw {
    worker_id: String,
    survey_weight: f64,
    male: bool,
    entry_year: i32,
    entry_age: i32,
    province: u8,
    occupation: u8,
    sector: u8,
    edu_level: usize,
    scores: Vec<f64>,
    flags: Vec<f64>,
    missing_scores: Vec<bool>,
    missing_flags: Vec<bool>,
    f0: f64,
    v: f64,
    g: f64,
    instrument: u8,
    /// (year, experience, group, eps)
    obs: Vec<(i32, f64, Group, f64)>,
}

pub fn generate_panel(cfg: &DgpConfig) -> Result<SynthOutput> {
    generate(cfg)
}

/// Panel generation under the explicit selection model; requires
/// `selection` to be set.
pub fn generate_selected_panel(cfg: &DgpConfig) -> Result<SynthOutput> {
    if cfg.selection.is_none() {
        return Err(Error::invalid("generate_selected_panel: selection spec missing"));
    }
    generate(cfg)
}

pub fn generate(cfg: &DgpConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let n_years = cfg.n_years();
    let log_price = cfg.price.log_path(n_years)?;
    let years: Vec<i32> = (cfg.first_year..=cfg.last_year).collect();

    let feature_names = feature_names(&cfg.covariates);
    let workers: Vec<WorkerDraw> = par::map_indexed(cfg.n_workers, |i| draw_worker(cfg, i));

    let mut builder = PanelBuilder::new();
    let mut noise = Vec::new();
    // Builder sorts by (worker, year); workers are pushed in index order
    // and years in ascending order, so `noise` stays aligned.
    for w in &workers {
        for &(year, experience, group, eps) in &w.obs {
            builder.push(ObsRecord {
                worker_id: w.worker_id.clone(),
                year,
                log_wage: 0.0, // filled below from components
                experience,
                group,
                occupation: format!("occ{}", w.occupation),
                sector: format!("sec{}", w.sector),
                province: format!("prov{}", w.province),
                birth_year: w.entry_year - w.entry_age,
                male: w.male,
                survey_weight: w.survey_weight,
            });
            noise.push(eps);
        }
    }
    let mut panel = builder.finish()?;

    let ground_truth = GroundTruth {
        worker_ids: workers.iter().map(|w| w.worker_id.clone()).collect(),
        z: workers.iter().map(|w| w.f0 + w.v).collect(),
        f0: workers.iter().map(|w| w.f0).collect(),
        v: workers.iter().map(|w| w.v).collect(),
        g: cfg.factor.as_ref().map(|_| workers.iter().map(|w| w.g).collect()),
        instrument: cfg
            .selection
            .as_ref()
            .map(|_| workers.iter().map(|w| w.instrument).collect()),
        years,
        log_price,
        delta0: cfg.delta0,
        delta1: cfg.delta1,
        delta_e: cfg.factor.as_ref().map(|f| {
            let max_e = (cfg.last_year - (cfg.first_year - cfg.entry_spread)) as usize;
            (0..=max_e).map(|e| f.delta_e.at(e)).collect()
        }),
        selection: cfg.selection.as_ref().map(|s| SelectionTruth {
            beta_r: s.beta_r,
            rho: s.rho,
            instrument_wage_effect: s.instrument_wage_effect,
        }),
        wage: cfg.wage.clone(),
        noise: Vec::new(), // filled after wages
    };

    // Noise was produced worker-by-worker in ascending year order, which
    // is exactly the builder's sort order, so `noise` is aligned with the
    // panel rows. Workers without observations are absent from the panel
    // but present in the truth set, so map by id.
    {
        let truth_row: std::collections::HashMap<&str, usize> = ground_truth
            .worker_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let ids: Vec<String> = panel.worker_ids().to_vec();
        for (i, o) in panel.observations_mut().iter_mut().enumerate() {
            let row = truth_row[ids[o.worker as usize].as_str()];
            o.log_wage = reconstruct_log_wage(
                &ground_truth,
                row,
                o.year,
                o.experience,
                o.male,
                o.group,
            ) + noise[i];
        }
    }

    let raw_covariates = build_raw_covariates(cfg, &workers, &feature_names);
    let ground_truth = GroundTruth {
        noise,
        ..ground_truth
    };

    Ok(SynthOutput {
        panel,
        raw_covariates,
        ground_truth,
    })
}

/// Noise-free log wage implied by the stored components; adding the
/// stored shock reproduces the panel wage exactly.
pub fn reconstruct_log_wage(
    truth: &GroundTruth,
    worker_row: usize,
    year: i32,
    experience: f64,
    male: bool,
    group: Group,
) -> f64 {
    let p = truth.log_price_for(year);
    let h = truth.h(experience);
    let z = truth.z[worker_row];
    let factor_term = match (&truth.g, &truth.delta_e) {
        (Some(g), Some(de)) => {
            let e = experience.round().max(0.0) as usize;
            g[worker_row] * de.get(e).copied().unwrap_or(0.0)
        }
        _ => 0.0,
    };
    let instrument_term = match (&truth.instrument, &truth.selection) {
        (Some(r), Some(s)) if group == Group::Private => {
            s.instrument_wage_effect * r[worker_row] as f64
        }
        _ => 0.0,
    };
    match group {
        Group::Government => {
            let gw = &truth.wage.gov;
            if let Some((a0, b)) = gw.rigid_tenure {
                a0 + b * experience + gw.male_gap * male as u8 as f64
            } else {
                p + h
                    + factor_term
                    + gw.z_loading * z
                    + gw.premium
                    + gw.premium_trend * (year - truth.years[0]) as f64
                    + gw.male_gap * male as u8 as f64
            }
        }
        Group::Private | Group::Other => {
            p + h
                + factor_term
                + z
                + truth.wage.male_gap_private * male as u8 as f64
                + instrument_term
        }
    }
}

fn feature_names(cov: &CovariateGenSpec) -> Vec<String> {
    let mut names = vec![
        "edu_lt_primary".to_string(),
        "edu_primary".to_string(),
        "edu_junior_sec".to_string(),
        "edu_senior_sec".to_string(),
        "edu_higher".to_string(),
    ];
    names.extend((0..cov.n_scores).map(|j| format!("score_{j}")));
    names.extend((0..cov.n_flags).map(|j| format!("flag_{j}")));
    names
}

fn feature_value(w: &WorkerDraw, name: &str) -> f64 {
    match name {
        "edu_lt_primary" => (w.edu_level == 0) as u8 as f64,
        "edu_primary" => (w.edu_level == 1) as u8 as f64,
        "edu_junior_sec" => (w.edu_level == 2) as u8 as f64,
        "edu_senior_sec" => (w.edu_level == 3) as u8 as f64,
        "edu_higher" => (w.edu_level == 4) as u8 as f64,
        _ => {
            if let Some(j) = name.strip_prefix("score_") {
                w.scores[j.parse::<usize>().expect("score index")]
            } else if let Some(j) = name.strip_prefix("flag_") {
                w.flags[j.parse::<usize>().expect("flag index")]
            } else {
                panic!("unknown feature {name}");
            }
        }
    }
}

fn eval_f0(spec: &F0Spec, w: &WorkerDraw) -> f64 {
    match spec {
        F0Spec::Linear { coefs } => coefs
            .iter()
            .map(|(name, c)| c * feature_value(w, name))
            .sum(),
        F0Spec::EducationOnly { coefs } => coefs[w.edu_level],
        F0Spec::AdditiveNonlinear => {
            let s0 = w.scores.first().copied().unwrap_or(0.0);
            let s1 = w.scores.get(1).copied().unwrap_or(0.0);
            let s2 = w.scores.get(2).copied().unwrap_or(0.0);
            let edu_higher = (w.edu_level == 4) as u8 as f64;
            let edu_senior = (w.edu_level == 3) as u8 as f64;
            let edu_low = (w.edu_level == 0) as u8 as f64;
            let flag0 = w.flags.first().copied().unwrap_or(0.0);
            0.30 * edu_higher + 0.14 * edu_senior - 0.12 * edu_low
                + 0.12 * (1.6 * s0).tanh()
                + 0.08 * (s1 * s1 - 1.0)
                + 0.12 * s2 * edu_higher
                + 0.06 * flag0
        }
        F0Spec::InteractionOnly { coef } => {
            let s0 = w.scores.first().copied().unwrap_or(0.0);
            let s1 = w.scores.get(1).copied().unwrap_or(0.0);
            coef * s0 * s1
        }
    }
}

fn softmax_sample(logits: &[f64], u: f64) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut cum = 0.0;
    for (k, e) in exps.iter().enumerate() {
        cum += e / total;
        if u < cum {
            return k;
        }
    }
    logits.len() - 1
}

fn draw_worker(cfg: &DgpConfig, index: usize) -> WorkerDraw {
    let mut rng = substream(cfg.seed, Domain::PanelWorker, index as u64);
    use rand::Rng;

    let survey_weight = (0.3 * draw_standard_normal(&mut rng)).exp();
    let male = rng.random::<f64>() < 0.55;
    let entry_age = 18 + rng.random_range(0..7); // 18..=24
    let late = cfg
        .late_entry_window
        .unwrap_or(cfg.last_year - cfg.first_year)
        .max(0);
    let entry_year =
        cfg.first_year - cfg.entry_spread + rng.random_range(0..=(cfg.entry_spread + late));
    let province = rng.random_range(0..8u8);

    let ability = draw_standard_normal(&mut rng);
    let edu_noise = draw_standard_normal(&mut rng);
    let edu_index = 0.8 * ability + 0.6 * edu_noise;
    let edu_level = match edu_index {
        x if x < -1.0 => 0,
        x if x < -0.2 => 1,
        x if x < 0.4 => 2,
        x if x < 1.1 => 3,
        _ => 4,
    };

    let scores: Vec<f64> = (0..cfg.covariates.n_scores)
        .map(|_| 0.5 * ability + 0.866 * draw_standard_normal(&mut rng))
        .collect();
    let flags: Vec<f64> = (0..cfg.covariates.n_flags)
        .map(|_| ((0.4 * ability + draw_standard_normal(&mut rng)) > 0.0) as u8 as f64)
        .collect();

    let occ_tilt = [0.6, 0.3, 0.0, -0.3, -0.6];
    let occ_logits: Vec<f64> = occ_tilt
        .iter()
        .map(|t| t * (edu_level as f64 - 2.0))
        .collect();
    let occupation = softmax_sample(&occ_logits, rng.random::<f64>()) as u8;
    let sec_tilt = [0.4, 0.0, -0.2, -0.4];
    let sec_logits: Vec<f64> = sec_tilt
        .iter()
        .map(|t| t * (edu_level as f64 - 2.0))
        .collect();
    let sector = softmax_sample(&sec_logits, rng.random::<f64>()) as u8;

    let v = cfg.projection_sd * draw_standard_normal(&mut rng);
    let g = match &cfg.factor {
        Some(f) => (f.g_log_mean + f.g_log_sd * draw_standard_normal(&mut rng)).exp(),
        None => {
            let _ = draw_standard_normal(&mut rng);
            1.0
        }
    };
    let instrument = match &cfg.selection {
        Some(s) => (rng.random::<f64>() < s.instrument_rate) as u8,
        None => {
            let _ = rng.random::<f64>();
            0
        }
    };

    let missing_scores: Vec<bool> = (0..cfg.covariates.n_scores)
        .map(|_| rng.random::<f64>() < cfg.covariates.missing_rate)
        .collect();
    let missing_flags: Vec<bool> = (0..cfg.covariates.n_flags)
        .map(|_| rng.random::<f64>() < cfg.covariates.missing_rate)
        .collect();

    let mut worker = WorkerDraw {
        worker_id: format!("w{index:07}"),
        survey_weight,
        male,
        entry_year,
        entry_age,
        province,
        occupation,
        sector,
        edu_level,
        scores,
        flags,
        missing_scores,
        missing_flags,
        f0: 0.0,
        v,
        g,
        instrument,
        obs: Vec::new(),
    };
    worker.f0 = eval_f0(&cfg.f0, &worker);
    let z = worker.f0 + worker.v;

    // Worker-level group when the explicit selection model is off.
    let baseline_group = {
        let gs = &cfg.group;
        let idx = gs.intercept
            + gs.male_coef * male as u8 as f64
            + gs.entry_age_coef * (entry_age as f64 - 21.0)
            + gs.occupation_effects
                .get(occupation as usize)
                .copied()
                .unwrap_or(0.0)
            + gs.sector_effects.get(sector as usize).copied().unwrap_or(0.0)
            + gs.skill_coef * worker.f0
            + gs.latent_coef * z
            - if z > gs.optout_threshold {
                gs.optout_strength * (z - gs.optout_threshold) * (z - gs.optout_threshold)
            } else {
                0.0
            };
        let p_gov = 1.0 / (1.0 + (-idx).exp());
        let u = rng.random::<f64>();
        if u < p_gov {
            Group::Government
        } else if rng.random::<f64>() < gs.other_frac {
            Group::Other
        } else {
            Group::Private
        }
    };

    let first_obs_year = worker.entry_year.max(cfg.first_year);
    for year in first_obs_year..=cfg.last_year {
        let experience = (year - worker.entry_year) as f64;
        let eps = cfg.noise_sd * draw_standard_normal(&mut rng);
        let xi = draw_standard_normal(&mut rng);
        let observed = rng.random::<f64>() < cfg.obs_rate;
        if !observed {
            continue;
        }
        let group = match &cfg.selection {
            None => baseline_group,
            Some(sel) => {
                let g_term: f64 = sel
                    .g_coefs
                    .iter()
                    .map(|(name, c)| c * feature_value(&worker, name))
                    .sum();
                let h_term = if sel.use_experience {
                    cfg.delta0 * experience + cfg.delta1 * experience * experience
                } else {
                    0.0
                };
                let pi = sel
                    .year_effects
                    .as_ref()
                    .map(|v| v[(year - cfg.first_year) as usize])
                    .unwrap_or(0.0);
                let index = sel.g_intercept + g_term + h_term + sel.beta_r * worker.instrument as f64 + pi;
                // Probit shock correlated with the wage shock.
                let eta = if cfg.noise_sd > 0.0 {
                    sel.rho * (eps / cfg.noise_sd) + (1.0 - sel.rho * sel.rho).sqrt() * xi
                } else {
                    xi
                };
                if index + eta > 0.0 {
                    Group::Private
                } else {
                    Group::Government
                }
            }
        };
        worker.obs.push((year, experience, group, eps));
    }
    worker
}

fn build_raw_covariates(
    cfg: &DgpConfig,
    workers: &[WorkerDraw],
    names: &[String],
) -> RawCovariates {
    let mut variables = Vec::new();
    for name in names {
        let is_edu = name.starts_with("edu_");
        let kind = if name.starts_with("score_") {
            VarKind::Continuous
        } else {
            VarKind::Dummy
        };
        let values: Vec<Option<f64>> = workers
            .iter()
            .map(|w| {
                let missing = if let Some(j) = name.strip_prefix("score_") {
                    w.missing_scores[j.parse::<usize>().unwrap()]
                } else if let Some(j) = name.strip_prefix("flag_") {
                    w.missing_flags[j.parse::<usize>().unwrap()]
                } else {
                    false
                };
                if missing {
                    None
                } else {
                    Some(feature_value(w, name))
                }
            })
            .collect();
        variables.push(RawVariable {
            name: name.clone(),
            kind,
            education: is_edu,
            values,
        });
    }
    // Worker-level instrument rides along as a covariate column so the
    // selection stage can pick it up by name.
    if cfg.selection.is_some() {
        variables.push(RawVariable {
            name: "parent_private".to_string(),
            kind: VarKind::Dummy,
            education: false,
            values: workers
                .iter()
                .map(|w| Some(w.instrument as f64))
                .collect(),
        });
    }
    RawCovariates {
        worker_ids: workers.iter().map(|w| w.worker_id.clone()).collect(),
        variables,
    }
}

/// Theoretical selection probability for a worker-year under the
/// explicit selection model (used by oracle tests).
pub fn selection_probability(
    sel: &SelectionSpec,
    cfg: &DgpConfig,
    g_term: f64,
    experience: f64,
    instrument: u8,
    year_idx: usize,
) -> f64 {
    let h_term = if sel.use_experience {
        cfg.delta0 * experience + cfg.delta1 * experience * experience
    } else {
        0.0
    };
    let pi = sel.year_effects.as_ref().map(|v| v[year_idx]).unwrap_or(0.0);
    normal_cdf(sel.g_intercept + g_term + h_term + sel.beta_r * instrument as f64 + pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::preprocess_covariates;
    use crate::stats::{weighted_mean, weighted_var};

    fn quiet_config() -> DgpConfig {
        DgpConfig {
            n_workers: 300,
            noise_sd: 0.0,
            projection_sd: 0.0,
            price: PricePath::Flat,
            delta0: 0.0,
            delta1: 0.0,
            group: GroupSpec {
                skill_coef: 0.0,
                ..GroupSpec::default()
            },
            seed: 11,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn all_noise_off_gives_wage_equal_f0() {
        let out = generate(&quiet_config()).unwrap();
        let rows = out.ground_truth.rows_for_panel(&out.panel);
        for o in out.panel.observations() {
            let row = rows[o.worker as usize];
            assert!(
                (o.log_wage - out.ground_truth.f0[row]).abs() < 1e-12,
                "wage {} f0 {}",
                o.log_wage,
                out.ground_truth.f0[row]
            );
        }
    }

    #[test]
    fn linear_f0_single_feature() {
        let mut cfg = quiet_config();
        cfg.f0 = F0Spec::Linear {
            coefs: vec![("flag_0".into(), 0.5)],
        };
        let out = generate(&cfg).unwrap();
        for (i, z) in out.ground_truth.z.iter().enumerate() {
            let flag = out
                .raw_covariates
                .variables
                .iter()
                .find(|v| v.name == "flag_0")
                .unwrap()
                .values[i]
                .unwrap();
            assert!((z - 0.5 * flag).abs() < 1e-14);
        }
    }

    #[test]
    fn wages_reconstruct_exactly_from_ground_truth() {
        let mut cfg = DgpConfig {
            n_workers: 400,
            seed: 5,
            ..DgpConfig::default()
        };
        cfg.wage.gov.premium = 0.2;
        cfg.wage.male_gap_private = 0.1;
        let out = generate(&cfg).unwrap();
        let rows = out.ground_truth.rows_for_panel(&out.panel);
        for (i, o) in out.panel.observations().iter().enumerate() {
            let rebuilt = reconstruct_log_wage(
                &out.ground_truth,
                rows[o.worker as usize],
                o.year,
                o.experience,
                o.male,
                o.group,
            ) + out.ground_truth.noise[i];
            assert!((o.log_wage - rebuilt).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let cfg = DgpConfig {
            n_workers: 200,
            seed: 99,
            ..DgpConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.panel.n_obs(), b.panel.n_obs());
        for (x, y) in a.panel.observations().iter().zip(b.panel.observations()) {
            assert_eq!(x.log_wage.to_bits(), y.log_wage.to_bits());
            assert_eq!(x.year, y.year);
        }
        assert_eq!(a.ground_truth.z, b.ground_truth.z);
    }

    #[test]
    fn yearly_mean_wage_matches_truth_within_mc_error() {
        let cfg = DgpConfig {
            n_workers: 4000,
            seed: 31,
            ..DgpConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let truth = &out.ground_truth;
        for (yi, &year) in truth.years.iter().enumerate() {
            let mut wages = Vec::new();
            let mut expected = Vec::new();
            let mut weights = Vec::new();
            for (i, o) in out.panel.observations().iter().enumerate() {
                if o.year != year {
                    continue;
                }
                wages.push(o.log_wage);
                weights.push(o.survey_weight);
                expected.push(out.panel.observations()[i].log_wage - truth.noise[i]);
            }
            if wages.len() < 50 {
                continue;
            }
            let diff = weighted_mean(&wages, &weights) - weighted_mean(&expected, &weights);
            let mc_se = (weighted_var(&wages, &weights) / wages.len() as f64).sqrt();
            assert!(
                diff.abs() < 3.0 * mc_se.max(1e-12),
                "year {year} ({yi}): diff {diff}, se {mc_se}"
            );
        }
    }

    #[test]
    fn selection_rho_zero_leaves_selected_noise_unbiased() {
        let cfg = DgpConfig {
            n_workers: 4000,
            selection: Some(SelectionSpec::default()),
            seed: 7,
            ..DgpConfig::default()
        };
        let out = generate_selected_panel(&cfg).unwrap();
        let mut eps = Vec::new();
        for (i, o) in out.panel.observations().iter().enumerate() {
            if o.group == Group::Private {
                eps.push(out.ground_truth.noise[i]);
            }
        }
        let mean: f64 = eps.iter().sum::<f64>() / eps.len() as f64;
        let sd = (eps.iter().map(|e| e * e).sum::<f64>() / eps.len() as f64).sqrt();
        let mc_se = sd / (eps.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * mc_se, "mean {mean}, se {mc_se}");
    }

    #[test]
    fn instrument_raises_selection_rates() {
        let cfg = DgpConfig {
            n_workers: 4000,
            selection: Some(SelectionSpec {
                rho: 0.5,
                beta_r: 0.5,
                ..SelectionSpec::default()
            }),
            seed: 13,
            ..DgpConfig::default()
        };
        let out = generate_selected_panel(&cfg).unwrap();
        let instrument = out.ground_truth.instrument.as_ref().unwrap();
        let rows = out.ground_truth.rows_for_panel(&out.panel);
        let mut rate = [0.0f64; 2];
        let mut weight = [0.0f64; 2];
        for o in out.panel.observations() {
            let r = instrument[rows[o.worker as usize]] as usize;
            weight[r] += o.survey_weight;
            if o.group == Group::Private {
                rate[r] += o.survey_weight;
            }
        }
        let share0 = rate[0] / weight[0];
        let share1 = rate[1] / weight[1];
        assert!(
            share1 > share0,
            "selection share with instrument {share1} <= without {share0}"
        );
    }

    #[test]
    fn positive_rho_biases_ols_on_selected_sample() {
        // With rho > 0 the selected sample over-represents high wage
        // shocks at low selection indices, biasing a naive covariate
        // regression relative to truth.
        let base = SelectionSpec {
            g_coefs: vec![("score_0".into(), 0.6)],
            g_intercept: 0.0,
            beta_r: 0.4,
            ..SelectionSpec::default()
        };
        let mut biases = Vec::new();
        for &rho in &[0.0, 0.6] {
            let cfg = DgpConfig {
                n_workers: 6000,
                selection: Some(SelectionSpec { rho, ..base.clone() }),
                f0: F0Spec::Linear {
                    coefs: vec![("score_0".into(), 0.3)],
                },
                projection_sd: 0.0,
                price: PricePath::Flat,
                delta0: 0.0,
                delta1: 0.0,
                seed: 17,
                ..DgpConfig::default()
            };
            let out = generate_selected_panel(&cfg).unwrap();
            let cm = preprocess_covariates(&out.raw_covariates, 1000, None).unwrap();
            let col = cm
                .continuous_names
                .iter()
                .position(|n| n == "score_0")
                .unwrap();
            let mut x = Vec::new();
            let mut y = Vec::new();
            for o in out.panel.observations() {
                if o.group != Group::Private {
                    continue;
                }
                let row = cm.row_of(out.panel.worker_id(o.worker)).unwrap();
                x.push(cm.continuous[(row, col)]);
                y.push(o.log_wage);
            }
            // Simple OLS slope.
            let mx: f64 = x.iter().sum::<f64>() / x.len() as f64;
            let my: f64 = y.iter().sum::<f64>() / y.len() as f64;
            let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
            let slope = sxy / sxx;
            // True slope in standardized units is 0.3 * sd(score_0).
            biases.push(slope);
        }
        // Selection on unobservables distorts the estimated coefficient:
        // the rho = 0.6 fit must sit further from the rho = 0 fit than
        // sampling noise alone would allow.
        assert!(
            (biases[1] - biases[0]).abs() > 0.01,
            "slopes {biases:?} should differ under selection"
        );
    }
}
