//! End-to-end pipeline: synth (optional) -> propensity -> price ->
//! profile -> learn -> predict -> {selection, heckman, factors, analyze},
//! with a content-hashed run manifest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use skillcast_core::cce::{factor_analysis, write_factor_path_csv, write_factors_csv, FactorConfig};
use skillcast_core::density_ratio::{selection_rule_report, SelectionRuleConfig};
use skillcast_core::heckman::{heckman_correction, HeckmanConfig};
use skillcast_core::learners::{
    make_folds, predict_skills, train_family, variable_importance,
    write_skills_csv, FoldAssignment, LearnGrids, LearnerFamily, TrainedFamily, TrainingSet,
};
use skillcast_core::panel::{
    write_covariates_csv, CovariateMatrix, Panel, RawCovariates,
};
use skillcast_core::price::{
    flat_spot_price, hedonic_price, FlatSpotConfig, HedonicConfig, SkillPriceSeries,
};
use skillcast_core::profile::{
    fit_within_quadratic, worker_mean_residual, write_signals_csv, ProfileFit, SkillSignals,
};
use skillcast_core::propensity::{propensity_weights, write_weights_csv};
use skillcast_core::regressions::{
    build_cohort_table, cohort_hiring_regression, informativeness_tables, jobfix_skills,
    premium_and_gender_tables, relative_skill_series, stability_compare, AnalysisInput, SeriesBy,
    DEFAULT_AGE_RANGE,
};
use skillcast_core::stats::winsorize_logs;
use skillcast_core::synth::{generate, DgpConfig};
use skillcast_core::{Error, Result};

use crate::logging;
use crate::stages::{
    ensure_dir, learn_metrics, preprocess_matrix, sha256_file, write_json_pretty,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputPaths {
    pub panel: PathBuf,
    pub covariates: PathBuf,
    pub covariate_schema: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub propensity: bool,
    pub price: bool,
    pub profile: bool,
    pub learn: bool,
    pub predict: bool,
    pub selection: bool,
    pub heckman: bool,
    pub factors: bool,
    pub analyze: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            propensity: true,
            price: true,
            profile: true,
            learn: true,
            predict: true,
            selection: true,
            heckman: false,
            factors: false,
            analyze: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub missing_indicator_threshold: usize,
    pub weighted_standardization: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            missing_indicator_threshold: 1000,
            weighted_standardization: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriceMethod {
    Flatspot,
    Hedonic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceStageConfig {
    pub method: PriceMethod,
    pub flatspot: FlatSpotConfig,
    pub hedonic: HedonicConfig,
}

impl Default for PriceStageConfig {
    fn default() -> Self {
        PriceStageConfig {
            method: PriceMethod::Flatspot,
            flatspot: FlatSpotConfig::default(),
            hedonic: HedonicConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnStageConfig {
    pub folds: usize,
    /// "all" or comma-separated family names.
    pub families: String,
    pub grids: LearnGrids,
}

impl Default for LearnStageConfig {
    fn default() -> Self {
        LearnStageConfig {
            folds: 10,
            families: "all".into(),
            grids: LearnGrids::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictStageConfig {
    pub family: String,
}

impl Default for PredictStageConfig {
    fn default() -> Self {
        PredictStageConfig {
            family: "gbm".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeckmanStageConfig {
    #[serde(flatten)]
    pub base: HeckmanConfig,
    /// Families rerun on the corrected signals.
    pub rerun_families: String,
}

impl Default for HeckmanStageConfig {
    fn default() -> Self {
        HeckmanStageConfig {
            base: HeckmanConfig::default(),
            rerun_families: "gbm".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeStageConfig {
    pub jobfix_reference: (String, String),
    pub cohort_min_gov_obs: Vec<usize>,
    pub stability_split_year: Option<i32>,
    pub age_range: (i32, i32),
    pub winsor_pcts: (f64, f64),
}

impl Default for AnalyzeStageConfig {
    fn default() -> Self {
        AnalyzeStageConfig {
            jobfix_reference: ("occ0".into(), "sec0".into()),
            cohort_min_gov_obs: vec![0, 10, 25, 50],
            stability_split_year: Some(2000),
            age_range: DEFAULT_AGE_RANGE,
            winsor_pcts: (2.5, 97.5),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub synth: Option<DgpConfig>,
    pub inputs: Option<InputPaths>,
    pub stages: StageToggles,
    pub preprocess: PreprocessConfig,
    pub propensity_survey_weighted: bool,
    pub price: PriceStageConfig,
    pub learn: LearnStageConfig,
    pub predict: PredictStageConfig,
    pub selection: SelectionRuleConfig,
    pub heckman: HeckmanStageConfig,
    pub factors: FactorConfig,
    pub analyze: AnalyzeStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            threads: None,
            out_dir: None,
            synth: None,
            inputs: None,
            stages: StageToggles::default(),
            preprocess: PreprocessConfig::default(),
            propensity_survey_weighted: true,
            price: PriceStageConfig::default(),
            learn: LearnStageConfig::default(),
            predict: PredictStageConfig::default(),
            selection: SelectionRuleConfig::default(),
            heckman: HeckmanStageConfig::default(),
            factors: FactorConfig::default(),
            analyze: AnalyzeStageConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::invalid(format!("cannot open config {}: {e}", path.display())))?;
        let cfg: PipelineConfig = serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::invalid(format!("config parse error: {e}")))?;
        Ok(cfg)
    }

    /// Stage dependency validation: every enabled stage's inputs must be
    /// produced by an enabled earlier stage or supplied as files.
    pub fn validate(&self) -> Result<()> {
        if self.synth.is_none() && self.inputs.is_none() {
            return Err(Error::invalid(
                "config: need either a synth block or input paths",
            ));
        }
        if self.synth.is_some() && self.inputs.is_some() {
            return Err(Error::invalid(
                "config: synth and inputs are mutually exclusive",
            ));
        }
        let s = &self.stages;
        let need = |flag: bool, name: &str, dep: bool, dep_name: &str| -> Result<()> {
            if flag && !dep {
                return Err(Error::invalid(format!(
                    "config: stage {name} requires stage {dep_name} to be enabled"
                )));
            }
            Ok(())
        };
        need(s.price, "price", s.propensity, "propensity")?;
        need(s.profile, "profile", s.price, "price")?;
        need(s.learn, "learn", s.profile, "profile")?;
        need(s.predict, "predict", s.learn, "learn")?;
        need(s.selection, "selection", s.predict, "predict")?;
        need(s.analyze, "analyze", s.predict, "predict")?;
        need(s.heckman, "heckman", s.price, "price")?;
        need(s.factors, "factors", s.price, "price")?;
        if self.learn.folds < 2 {
            return Err(Error::invalid("config: learn.folds must be at least 2"));
        }
        crate::stages::parse_families(&self.learn.families)?;
        LearnerFamily::parse(&self.predict.family)?;
        crate::stages::parse_families(&self.heckman.rerun_families)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: String,
    pub outputs: Vec<FileRecord>,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub crate_version: String,
    pub stages: Vec<StageRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
}

struct PipelineState {
    panel: Panel,
    raw_cov: RawCovariates,
    cov: CovariateMatrix,
    price: Option<SkillPriceSeries>,
    profile: Option<ProfileFit>,
    signals: Option<SkillSignals>,
    trained: Option<Vec<(LearnerFamily, TrainedFamily)>>,
    folds: Option<FoldAssignment>,
    skills: Option<HashMap<String, f64>>,
    skills_vec: Option<Vec<(String, f64)>>,
}

fn config_hash(cfg: &PipelineConfig) -> Result<String> {
    use sha2::{Digest, Sha256};
    // Thread count is an execution knob, not a data-defining parameter:
    // outputs are identical across thread counts, so the hash must be too.
    let mut normalized = cfg.clone();
    normalized.threads = None;
    let bytes = serde_json::to_vec(&normalized)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

/// Run the configured stages into `out_dir`. Stage failure is recorded
/// in the manifest and downstream stages are skipped.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    match cfg.threads {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            pool.install(|| run_inner(cfg, out_dir))
        }
        _ => run_inner(cfg, out_dir),
    }
}

fn run_inner(cfg: &PipelineConfig, out_dir: &Path) -> Result<RunManifest> {
    let mut manifest = RunManifest {
        config_sha256: config_hash(cfg)?,
        seed: cfg.seed,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        stages: Vec::new(),
        failed_stage: None,
    };

    // Source data: synthetic generation or files.
    let t0 = Instant::now();
    let (panel, raw_cov, synth_outputs) = match (&cfg.synth, &cfg.inputs) {
        (Some(dgp), None) => {
            let mut dgp = dgp.clone();
            dgp.seed = cfg.seed;
            let out = generate(&dgp)?;
            let panel_path = out_dir.join("panel.csv");
            let cov_path = out_dir.join("covariates.csv");
            let schema_path = out_dir.join("covariates.schema.json");
            let truth_path = out_dir.join("ground_truth.json");
            out.panel.write_csv_path(&panel_path)?;
            write_covariates_csv(&out.raw_covariates, &cov_path, &schema_path)?;
            write_json_pretty(&out.ground_truth, &truth_path)?;
            (
                out.panel,
                out.raw_covariates,
                vec![panel_path, cov_path, schema_path, truth_path],
            )
        }
        (None, Some(inputs)) => {
            let panel = Panel::read_csv_path(&inputs.panel)?;
            let raw = skillcast_core::panel::read_covariates_csv(
                &inputs.covariates,
                &inputs.covariate_schema,
            )?;
            (panel, raw, vec![])
        }
        _ => unreachable!("validated"),
    };
    record_stage(&mut manifest, out_dir, "synth", t0, Ok(synth_outputs));

    let t0 = Instant::now();
    let cov = preprocess_matrix(
        &raw_cov,
        Some(&panel),
        cfg.preprocess.missing_indicator_threshold,
        cfg.preprocess.weighted_standardization,
    )?;
    for wmsg in &cov.warnings {
        logging::warn(wmsg);
    }
    record_stage(&mut manifest, out_dir, "preprocess", t0, Ok(vec![]));

    let mut state = PipelineState {
        panel,
        raw_cov,
        cov,
        price: None,
        profile: None,
        signals: None,
        trained: None,
        folds: None,
        skills: None,
        skills_vec: None,
    };
    let _ = &state.raw_cov;

    type StageFn<'a> =
        Box<dyn FnOnce(&mut PipelineState, &PipelineConfig, &Path) -> Result<Vec<PathBuf>> + 'a>;
    let stage_list: Vec<(&str, bool, StageFn)> = vec![
        ("propensity", cfg.stages.propensity, Box::new(stage_propensity)),
        ("price", cfg.stages.price, Box::new(stage_price)),
        ("profile", cfg.stages.profile, Box::new(stage_profile)),
        ("learn", cfg.stages.learn, Box::new(stage_learn)),
        ("predict", cfg.stages.predict, Box::new(stage_predict)),
        ("selection", cfg.stages.selection, Box::new(stage_selection)),
        ("heckman", cfg.stages.heckman, Box::new(stage_heckman)),
        ("factors", cfg.stages.factors, Box::new(stage_factors)),
        ("analyze", cfg.stages.analyze, Box::new(stage_analyze)),
    ];

    for (name, enabled, stage) in stage_list {
        if manifest.failed_stage.is_some() {
            manifest.stages.push(StageRecord {
                name: name.into(),
                status: "skipped".into(),
                outputs: vec![],
                wall_ms: 0,
                message: None,
            });
            continue;
        }
        if !enabled {
            manifest.stages.push(StageRecord {
                name: name.into(),
                status: "disabled".into(),
                outputs: vec![],
                wall_ms: 0,
                message: None,
            });
            continue;
        }
        logging::info(&format!("stage {name}"));
        let t0 = Instant::now();
        let result = stage(&mut state, cfg, out_dir);
        if result.is_err() {
            manifest.failed_stage = Some(name.into());
        }
        record_stage(&mut manifest, out_dir, name, t0, result);
    }

    write_json_pretty(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn record_stage(
    manifest: &mut RunManifest,
    out_dir: &Path,
    name: &str,
    t0: Instant,
    result: Result<Vec<PathBuf>>,
) {
    let wall_ms = t0.elapsed().as_millis() as u64;
    match result {
        Ok(paths) => {
            let outputs = paths
                .iter()
                .map(|p| FileRecord {
                    path: p
                        .strip_prefix(out_dir)
                        .unwrap_or(p)
                        .to_string_lossy()
                        .into_owned(),
                    sha256: sha256_file(p).unwrap_or_default(),
                })
                .collect();
            manifest.stages.push(StageRecord {
                name: name.into(),
                status: "ok".into(),
                outputs,
                wall_ms,
                message: None,
            });
        }
        Err(e) => {
            logging::warn(&format!("stage {name} failed: {e}"));
            manifest.stages.push(StageRecord {
                name: name.into(),
                status: "failed".into(),
                outputs: vec![],
                wall_ms,
                message: Some(e.to_string()),
            });
        }
    }
}

fn stage_propensity(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let outcome = propensity_weights(&state.panel, cfg.propensity_survey_weighted)?;
    state.panel.set_analysis_weights(&outcome.analysis_weights)?;
    if outcome.n_clipped > 0 {
        logging::warn(&format!(
            "propensity: clipped {} propensity scores",
            outcome.n_clipped
        ));
    }
    let path = out_dir.join("weights.csv");
    write_weights_csv(&outcome.rows, &path)?;
    Ok(vec![path])
}

fn stage_price(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut price_cfg = cfg.price.flatspot.clone();
    price_cfg.seed = cfg.seed ^ 0x5052_4943;
    let series = match cfg.price.method {
        PriceMethod::Flatspot => flat_spot_price(&state.panel, &price_cfg)?,
        PriceMethod::Hedonic => hedonic_price(&state.panel, &state.cov, &cfg.price.hedonic)?,
    };
    let path = out_dir.join("price.csv");
    series.write_csv(&path)?;
    state.price = Some(series);
    Ok(vec![path])
}

fn stage_profile(
    state: &mut PipelineState,
    _cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let price = state.price.as_ref().expect("price stage ran");
    let profile = fit_within_quadratic(&state.panel, price)?;
    let signals = worker_mean_residual(&state.panel, price, &profile)?;
    let sig_path = out_dir.join("signals.csv");
    write_signals_csv(&signals, &sig_path)?;
    let prof_path = out_dir.join("profile.json");
    write_json_pretty(&profile, &prof_path)?;
    state.profile = Some(profile);
    state.signals = Some(signals);
    Ok(vec![sig_path, prof_path])
}

fn stage_learn(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let signals = state.signals.as_ref().expect("profile stage ran");
    let train = TrainingSet::from_signals(signals, &state.cov)?;
    let folds = make_folds(train.n(), cfg.learn.folds, cfg.seed ^ 0x464f_4c44)?;
    let families = crate::stages::parse_families(&cfg.learn.families)?;
    let mut trained = Vec::new();
    for fam in families {
        let t = train_family(fam, &train, &folds, &cfg.learn.grids, cfg.seed)?;
        trained.push((fam, t));
    }
    let mut outputs = Vec::new();
    for (fam, t) in &trained {
        let path = out_dir.join(format!("model_{}.json", fam.as_str()));
        t.model.save_json(&path)?;
        outputs.push(path);
    }
    let metrics = learn_metrics(&trained, train.n(), folds.k, cfg.seed);
    let mpath = out_dir.join("metrics.json");
    write_json_pretty(&metrics, &mpath)?;
    outputs.push(mpath);
    state.trained = Some(trained);
    state.folds = Some(folds);
    Ok(outputs)
}

fn stage_predict(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let family = LearnerFamily::parse(&cfg.predict.family)?;
    let trained = state.trained.as_ref().expect("learn stage ran");
    let model = &trained
        .iter()
        .find(|(f, _)| *f == family)
        .ok_or_else(|| {
            Error::invalid(format!(
                "predict: family {} not trained",
                family.as_str()
            ))
        })?
        .1
        .model;
    let skills = predict_skills(model, &state.cov)?;
    let path = out_dir.join("skills.csv");
    write_skills_csv(&skills, &path)?;
    let mut outputs = vec![path];
    if let Ok(imp) = variable_importance(model) {
        let ipath = out_dir.join("importance.csv");
        let mut wtr = csv::Writer::from_path(&ipath)?;
        wtr.write_record(["feature", "importance"])?;
        for (name, v) in &imp {
            wtr.write_record([name.as_str(), &v.to_string()])?;
        }
        wtr.flush()?;
        outputs.push(ipath);
    }
    state.skills = Some(skills.iter().cloned().collect());
    state.skills_vec = Some(skills);
    Ok(outputs)
}

fn stage_selection(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let skills = state.skills_vec.as_ref().expect("predict stage ran");
    let mut sel_cfg = cfg.selection.clone();
    sel_cfg.seed = cfg.seed ^ 0x53454c45;
    let report = selection_rule_report(skills, &state.panel, &sel_cfg)?;
    let path = out_dir.join("rule.csv");
    report.write_csv(&path)?;
    Ok(vec![path])
}

fn stage_heckman(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let price = state.price.as_ref().expect("price stage ran");
    let dir = out_dir.join("heckman");
    ensure_dir(&dir)?;
    let mut hk_cfg = cfg.heckman.base.clone();
    hk_cfg.seed = cfg.seed ^ 0x4845_434b;
    let outcome = heckman_correction(&state.panel, &state.cov, price, &hk_cfg)?;

    #[derive(Serialize)]
    struct HeckmanSummary<'a> {
        gamma_imr: f64,
        gamma_se: f64,
        delta0: f64,
        delta1: f64,
        first_stage_wald: f64,
        first_stage_p: f64,
        exclusion_wald: f64,
        exclusion_p: f64,
        probit_terms: Vec<(&'a str, f64, f64)>,
    }
    let probit_terms: Vec<(&str, f64, f64)> = outcome
        .probit
        .feature_names
        .iter()
        .enumerate()
        .map(|(j, n)| {
            (
                n.as_str(),
                outcome.probit.coefficients[j],
                outcome.probit.robust_cov[(j, j)].max(0.0).sqrt(),
            )
        })
        .collect();
    let summary = HeckmanSummary {
        gamma_imr: outcome.gamma_imr,
        gamma_se: outcome.gamma_se,
        delta0: outcome.delta0,
        delta1: outcome.delta1,
        first_stage_wald: outcome.probit.wald_instrument,
        first_stage_p: outcome.probit.p_value,
        exclusion_wald: outcome.exclusion_wald,
        exclusion_p: outcome.exclusion_p,
        probit_terms,
    };
    let spath = dir.join("summary.json");
    write_json_pretty(&summary, &spath)?;
    let sigpath = dir.join("corrected_signals.csv");
    write_signals_csv(&outcome.corrected_signals, &sigpath)?;
    let mut outputs = vec![spath, sigpath];

    // Rerun the learner stage on corrected signals.
    let rerun = crate::stages::parse_families(&cfg.heckman.rerun_families)?;
    if !rerun.is_empty() {
        let train = TrainingSet::from_signals(&outcome.corrected_signals, &state.cov)?;
        let folds = make_folds(train.n(), cfg.learn.folds, cfg.seed ^ 0x464f_4c44)?;
        let mut trained = Vec::new();
        for fam in rerun {
            let t = train_family(fam, &train, &folds, &cfg.learn.grids, cfg.seed)?;
            let mpath = dir.join(format!("model_{}.json", fam.as_str()));
            t.model.save_json(&mpath)?;
            outputs.push(mpath);
            // Corrected out-of-sample skills and comparison with baseline.
            let corrected = predict_skills(&t.model, &state.cov)?;
            let cpath = dir.join(format!("skills_{}.csv", fam.as_str()));
            write_skills_csv(&corrected, &cpath)?;
            outputs.push(cpath);
            if let Some(base) = &state.skills {
                let corrected_map: HashMap<String, f64> = corrected.into_iter().collect();
                let weights: HashMap<String, f64> =
                    base.keys().map(|k| (k.clone(), 1.0)).collect();
                if let Ok(rep) = stability_compare(base, &corrected_map, &weights) {
                    let rpath = dir.join(format!("stability_{}.json", fam.as_str()));
                    write_json_pretty(&rep, &rpath)?;
                    outputs.push(rpath);
                }
            }
            trained.push((fam, t));
        }
        let metrics = learn_metrics(&trained, train.n(), folds.k, cfg.seed);
        let mpath = dir.join("metrics.json");
        write_json_pretty(&metrics, &mpath)?;
        outputs.push(mpath);
    }
    Ok(outputs)
}

fn stage_factors(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let price = state.price.as_ref().expect("price stage ran");
    let outcome = factor_analysis(&state.panel, price, &cfg.factors)?;
    let fpath = out_dir.join("factors.csv");
    write_factors_csv(&outcome, &fpath)?;
    let ppath = out_dir.join("factor_path.csv");
    write_factor_path_csv(&outcome.fit, &ppath)?;
    Ok(vec![fpath, ppath])
}

fn stage_analyze(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join("tables");
    ensure_dir(&dir)?;
    let skills = state.skills.as_ref().expect("predict stage ran");
    let profile = state.profile.as_ref().expect("profile stage ran");
    let input = AnalysisInput {
        panel: &state.panel,
        skills,
        profile,
        age_range: cfg.analyze.age_range,
    };
    let mut outputs = Vec::new();

    let info = informativeness_tables(&input)?;
    let p = dir.join("informativeness.csv");
    info.write_csv(&p)?;
    outputs.push(p);

    let (premium, gender) = premium_and_gender_tables(&input)?;
    let p = dir.join("premium.csv");
    premium.write_csv(&p)?;
    outputs.push(p);
    let p = dir.join("gender_gap.csv");
    gender.write_csv(&p)?;
    outputs.push(p);

    let jobfix = jobfix_skills(
        &input,
        (
            cfg.analyze.jobfix_reference.0.as_str(),
            cfg.analyze.jobfix_reference.1.as_str(),
        ),
    )?;
    for (label, by) in [("year", SeriesBy::Year), ("cohort", SeriesBy::CohortBin)] {
        let raw = relative_skill_series(&input, by, skills)?;
        let p = dir.join(format!("relative_by_{label}.csv"));
        raw.write_csv(&p)?;
        outputs.push(p);
        let fixed = relative_skill_series(&input, by, &jobfix)?;
        let p = dir.join(format!("relative_by_{label}_jobfix.csv"));
        fixed.write_csv(&p)?;
        outputs.push(p);
    }

    for &min_obs in &cfg.analyze.cohort_min_gov_obs {
        let table = build_cohort_table(&input, &jobfix, min_obs)?;
        match cohort_hiring_regression(&table) {
            Ok(t) => {
                let p = dir.join(format!("cohort_hiring_min{min_obs}.csv"));
                t.write_csv(&p)?;
                outputs.push(p);
            }
            Err(Error::TooFewCohorts { n_cohorts, min }) => {
                logging::warn(&format!(
                    "cohort hiring (min {min_obs} gov obs): {n_cohorts} cohorts < {min}, skipped"
                ));
            }
            Err(e) => return Err(e),
        }
    }

    // Winsorized wage descriptives by group.
    {
        let p = dir.join("descriptives.csv");
        let mut wtr = csv::Writer::from_path(&p)?;
        wtr.write_record(["group", "n_obs", "weighted_share", "mean_winsorized_rel_wage"])?;
        let panel = &state.panel;
        let logs: Vec<f64> = panel.observations().iter().map(|o| o.log_wage).collect();
        let w: Vec<f64> = panel
            .observations()
            .iter()
            .map(|o| o.survey_weight)
            .collect();
        let wins = winsorize_logs(&logs, cfg.analyze.winsor_pcts.0, cfg.analyze.winsor_pcts.1, &w);
        let total_w: f64 = w.iter().sum();
        let overall_mean_wage: f64 = wins
            .iter()
            .zip(&w)
            .map(|(l, wi)| wi * l.exp())
            .sum::<f64>()
            / total_w;
        for group in [
            skillcast_core::panel::Group::Government,
            skillcast_core::panel::Group::Private,
            skillcast_core::panel::Group::Other,
        ] {
            let mut n = 0usize;
            let mut gw = 0.0;
            let mut wage = 0.0;
            for (i, o) in panel.observations().iter().enumerate() {
                if o.group == group {
                    n += 1;
                    gw += o.survey_weight;
                    wage += o.survey_weight * wins[i].exp();
                }
            }
            let rel = if gw > 0.0 {
                wage / gw / overall_mean_wage
            } else {
                f64::NAN
            };
            wtr.write_record([
                group.as_str().to_string(),
                n.to_string(),
                (gw / total_w).to_string(),
                rel.to_string(),
            ])?;
        }
        wtr.flush()?;
        outputs.push(p);
    }

    // Time-stability exercise: retrain the chosen family on pre/post
    // split-year signals (no re-tuning), predict everyone, compare.
    if let Some(split) = cfg.analyze.stability_split_year {
        if let Some(p) = stability_exercise(state, cfg, &dir, split)? {
            outputs.push(p);
        }
    }
    Ok(outputs)
}

fn stability_exercise(
    state: &PipelineState,
    cfg: &PipelineConfig,
    dir: &Path,
    split: i32,
) -> Result<Option<PathBuf>> {
    let Some(trained) = &state.trained else {
        return Ok(None);
    };
    let family = LearnerFamily::parse(&cfg.predict.family)?;
    let Some((_, base_fit)) = trained.iter().find(|(f, _)| *f == family) else {
        return Ok(None);
    };
    let price = state.price.as_ref().expect("price stage ran");
    let profile = state.profile.as_ref().expect("profile stage ran");
    let baseline = state.skills.as_ref().expect("predict stage ran");

    // Pin the tuned hyperparameters; no re-tuning on the halves.
    let grids = match &base_fit.model.fitted {
        skillcast_core::learners::FittedState::Gbm(g) => LearnGrids {
            gbm: vec![g.params],
            ..cfg.learn.grids.clone()
        },
        skillcast_core::learners::FittedState::Forest(f) => LearnGrids {
            forest: vec![f.params],
            ..cfg.learn.grids.clone()
        },
        _ => cfg.learn.grids.clone(),
    };

    let mut rows = Vec::new();
    for (label, pre) in [("pre", true), ("post", false)] {
        // Sub-panel restricted to the window.
        let mut builder = skillcast_core::panel::PanelBuilder::new();
        for o in state.panel.observations() {
            let keep = if pre { o.year <= split } else { o.year > split };
            if !keep {
                continue;
            }
            builder.push(skillcast_core::panel::ObsRecord {
                worker_id: state.panel.worker_id(o.worker).to_string(),
                year: o.year,
                log_wage: o.log_wage,
                experience: o.experience,
                group: o.group,
                occupation: state.panel.occupations.label(o.occupation).to_string(),
                sector: state.panel.sectors.label(o.sector).to_string(),
                province: state.panel.provinces.label(o.province).to_string(),
                birth_year: o.birth_year,
                male: o.male,
                survey_weight: o.survey_weight,
            });
        }
        let mut sub = builder.finish()?;
        // Carry over analysis weights by (worker, year).
        let weights: Vec<f64> = sub
            .observations()
            .iter()
            .map(|o| {
                let id = sub.worker_id(o.worker).to_string();
                state
                    .panel
                    .worker_code(&id)
                    .and_then(|c| {
                        state
                            .panel
                            .worker_obs(c)
                            .iter()
                            .find(|po| po.year == o.year)
                            .map(|po| po.analysis_weight)
                    })
                    .unwrap_or(0.0)
            })
            .collect();
        sub.set_analysis_weights(&weights)?;

        let signals = match worker_mean_residual(&sub, price, profile) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let train = match TrainingSet::from_signals(&signals, &state.cov) {
            Ok(t) => t,
            Err(_) => continue,
        };
        if train.n() < cfg.learn.folds {
            continue;
        }
        let folds = make_folds(train.n(), cfg.learn.folds, cfg.seed ^ 0x464f_4c44)?;
        let refit = train_family(family, &train, &folds, &grids, cfg.seed)?;
        let preds: HashMap<String, f64> =
            predict_skills(&refit.model, &state.cov)?.into_iter().collect();
        let weights: HashMap<String, f64> = baseline.keys().map(|k| (k.clone(), 1.0)).collect();
        let rep = stability_compare(baseline, &preds, &weights)?;
        rows.push((label.to_string(), train.n(), rep));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let p = dir.join("stability.csv");
    let mut wtr = csv::Writer::from_path(&p)?;
    wtr.write_record([
        "window",
        "n_train",
        "pearson_r",
        "spearman_rho",
        "slope_through_origin",
        "n_compare",
    ])?;
    for (label, n_train, rep) in rows {
        wtr.write_record([
            label,
            n_train.to_string(),
            rep.pearson_r.to_string(),
            rep.spearman_rho.to_string(),
            rep.slope_through_origin.to_string(),
            rep.n_compare.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(Some(p))
}

/// Run the full pipeline from a config file, resolving the output
/// directory from flags/config.
pub fn run_from_config_path(
    config_path: &Path,
    out_dir_flag: Option<&Path>,
    seed_flag: Option<u64>,
    threads_flag: Option<usize>,
) -> Result<RunManifest> {
    let mut cfg = PipelineConfig::from_path(config_path)?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    if let Some(threads) = threads_flag {
        cfg.threads = Some(threads);
    }
    let out_dir = out_dir_flag
        .map(|p| p.to_path_buf())
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::invalid("no output directory: pass --out-dir or set out_dir"))?;
    run_pipeline(&cfg, &out_dir)
}
