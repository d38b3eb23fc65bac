use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use skillcast_cli::{logging, stages, EXIT_CONFIG, EXIT_STAGE};
use skillcast_core::density_ratio::SelectionRuleConfig;
use skillcast_core::heckman::{heckman_correction, HeckmanConfig};
use skillcast_core::learners::{
    make_folds, predict_skills, train_family, variable_importance, LearnGrids, LearnerModel,
    TrainingSet,
};
use skillcast_core::panel::Panel;
use skillcast_core::price::{
    flat_spot_price, hedonic_price, FlatSpotConfig, HedonicConfig, PriceStatistic,
    SkillPriceSeries,
};
use skillcast_core::profile::{
    fit_within_quadratic, read_signals_csv, worker_mean_residual, write_signals_csv, ProfileFit,
    SkillSignal, SkillSignals,
};
use skillcast_core::propensity::{propensity_weights, read_weights_csv, write_weights_csv};
use skillcast_core::regressions::{
    build_cohort_table, cohort_hiring_regression, informativeness_tables, jobfix_skills,
    premium_and_gender_tables, relative_skill_series, AnalysisInput, SeriesBy, DEFAULT_AGE_RANGE,
};
use skillcast_core::synth::{generate, DgpConfig};
use skillcast_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "skillcast",
    about = "Latent worker-skill estimation from noisy panel wages",
    version
)]
struct Cli {
    /// Cap the global worker count for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PanelWeightsArgs {
    /// Worker-year panel CSV.
    #[arg(long)]
    panel: PathBuf,
    /// Analysis-weight file from the propensity stage; without it,
    /// survey weights are used as-is.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl PanelWeightsArgs {
    fn load(&self) -> Result<Panel> {
        let mut panel = Panel::read_csv_path(&self.panel)?;
        if let Some(wpath) = &self.weights {
            let w = read_weights_csv(&panel, wpath)?;
            panel.set_analysis_weights(&w)?;
        }
        Ok(panel)
    }
}

#[derive(Args)]
struct CovariateArgs {
    /// Covariate CSV (worker_id plus one column per variable).
    #[arg(long)]
    covariates: PathBuf,
    /// Sidecar JSON schema declaring each column continuous/dummy.
    #[arg(long)]
    schema: PathBuf,
    /// Missing-indicator threshold for dummies.
    #[arg(long, default_value_t = 1000)]
    missing_indicator_threshold: usize,
    /// Standardize without survey weights.
    #[arg(long)]
    unweighted_standardization: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel with known ground truth.
    Synth {
        /// DGP configuration JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the government-membership logit and write ATT analysis weights.
    Propensity {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fit the logit without survey weights.
        #[arg(long)]
        unweighted: bool,
    },
    /// Estimate the per-year skill price.
    Price {
        #[command(flatten)]
        input: PanelWeightsArgs,
        /// flatspot or hedonic.
        #[arg(long, default_value = "flatspot")]
        method: String,
        #[arg(long, default_value_t = 22.0)]
        window_lo: f64,
        #[arg(long, default_value_t = 34.0)]
        window_hi: f64,
        /// median or mean.
        #[arg(long, default_value = "median")]
        statistic: String,
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Covariates (hedonic method only).
        #[arg(long)]
        covariates: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the quadratic experience profile and extract skill signals.
    Profile {
        #[command(flatten)]
        input: PanelWeightsArgs,
        #[arg(long)]
        price: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the fitted profile JSON here.
        #[arg(long)]
        profile_json: Option<PathBuf>,
    },
    /// Train the learner families under shared cross-validation folds.
    Learn {
        #[arg(long)]
        signals: PathBuf,
        #[command(flatten)]
        cov: CovariateArgs,
        /// Panel for weighted standardization (optional).
        #[arg(long)]
        panel: Option<PathBuf>,
        /// "all" or comma-separated: edu_ols,basis,lasso,random_forest,gbm.
        #[arg(long, default_value = "all")]
        families: String,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict skills for all workers in a covariate file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        cov: CovariateArgs,
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the government selection rule via density ratios.
    Selection {
        /// Predicted skills CSV.
        #[arg(long)]
        skills: PathBuf,
        /// Panel CSV providing group labels and entry years.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 2000)]
        split_year: i32,
        #[arg(long, default_value_t = skillcast_core::density_ratio::DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = skillcast_core::density_ratio::DEFAULT_LAMBDA)]
        lambda: f64,
        /// Cross-validate (sigma, lambda) instead of fixed values.
        #[arg(long)]
        cv: bool,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probit + inverse-Mills selection correction with exclusion test.
    Heckman {
        #[command(flatten)]
        input: PanelWeightsArgs,
        #[command(flatten)]
        cov: CovariateArgs,
        #[arg(long)]
        price: PathBuf,
        /// Covariate column holding the binary instrument.
        #[arg(long, default_value = "parent_private")]
        instrument: String,
        #[arg(long, default_value_t = 23)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Experience-factor extension (worker loadings on a common path).
    Factors {
        #[command(flatten)]
        input: PanelWeightsArgs,
        #[arg(long)]
        price: PathBuf,
        #[arg(long, default_value_t = 30)]
        min_cell: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Downstream regression tables and series.
    Analyze {
        #[command(flatten)]
        input: PanelWeightsArgs,
        #[arg(long)]
        skills: PathBuf,
        /// Fitted profile JSON (for life-cycle skills).
        #[arg(long)]
        profile_json: Option<PathBuf>,
        /// Which tables to emit (only "all" is supported).
        #[arg(long, default_value = "all")]
        tables: String,
        /// Reference occupation and sector for job-composition fixes.
        #[arg(long, default_value = "occ0")]
        jobfix_occupation: String,
        #[arg(long, default_value = "sec0")]
        jobfix_sector: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline from one JSON config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn classify_exit(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            logging::warn("global thread pool already initialized; --threads ignored");
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("skillcast: error: {e}");
            ExitCode::from(classify_exit(&e))
        }
    }
}

fn load_price(path: &PathBuf) -> Result<SkillPriceSeries> {
    SkillPriceSeries::read_csv(path)
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth {
            config,
            out_dir,
            seed,
        } => {
            let f = std::fs::File::open(&config)
                .map_err(|e| Error::invalid(format!("cannot open {}: {e}", config.display())))?;
            let mut dgp: DgpConfig = serde_json::from_reader(std::io::BufReader::new(f))
                .map_err(|e| Error::invalid(format!("config parse error: {e}")))?;
            if let Some(s) = seed {
                dgp.seed = s;
            }
            stages::ensure_dir(&out_dir)?;
            let out = generate(&dgp)?;
            out.panel.write_csv_path(&out_dir.join("panel.csv"))?;
            skillcast_core::panel::write_covariates_csv(
                &out.raw_covariates,
                &out_dir.join("covariates.csv"),
                &out_dir.join("covariates.schema.json"),
            )?;
            stages::write_json_pretty(&out.ground_truth, &out_dir.join("ground_truth.json"))?;
            println!(
                "synth: {} workers, {} observations -> {}",
                out.ground_truth.worker_ids.len(),
                out.panel.n_obs(),
                out_dir.display()
            );
            Ok(0)
        }
        Command::Propensity {
            panel,
            out,
            unweighted,
        } => {
            let panel = Panel::read_csv_path(&panel)?;
            let outcome = propensity_weights(&panel, !unweighted)?;
            write_weights_csv(&outcome.rows, &out)?;
            println!(
                "propensity: {} rows, {} other-group observations excluded, {} clipped",
                outcome.rows.len(),
                outcome.n_excluded_other,
                outcome.n_clipped
            );
            Ok(0)
        }
        Command::Price {
            input,
            method,
            window_lo,
            window_hi,
            statistic,
            bootstrap,
            seed,
            covariates,
            schema,
            out,
        } => {
            let panel = input.load()?;
            let series = match method.as_str() {
                "flatspot" => {
                    let cfg = FlatSpotConfig {
                        window: (window_lo, window_hi),
                        statistic: match statistic.as_str() {
                            "median" => PriceStatistic::Median,
                            "mean" => PriceStatistic::Mean,
                            other => {
                                return Err(Error::invalid(format!(
                                    "unknown statistic {other:?}"
                                )))
                            }
                        },
                        bootstrap,
                        seed,
                        use_gap_pairs: false,
                    };
                    flat_spot_price(&panel, &cfg)?
                }
                "hedonic" => {
                    let (cov_path, schema_path) = match (&covariates, &schema) {
                        (Some(c), Some(s)) => (c, s),
                        _ => {
                            return Err(Error::invalid(
                                "hedonic method needs --covariates and --schema",
                            ))
                        }
                    };
                    let (_, cm) =
                        stages::load_covariates(cov_path, schema_path, Some(&panel), 1000, true)?;
                    hedonic_price(&panel, &cm, &HedonicConfig::default())?
                }
                other => return Err(Error::invalid(format!("unknown method {other:?}"))),
            };
            series.write_csv(&out)?;
            println!("price: {} years -> {}", series.years.len(), out.display());
            Ok(0)
        }
        Command::Profile {
            input,
            price,
            out,
            profile_json,
        } => {
            let panel = input.load()?;
            let series = load_price(&price)?;
            let fit = fit_within_quadratic(&panel, &series)?;
            let signals = worker_mean_residual(&panel, &series, &fit)?;
            write_signals_csv(&signals, &out)?;
            if let Some(pj) = profile_json {
                stages::write_json_pretty(&fit, &pj)?;
            }
            println!(
                "profile: delta0 {:.5} (se {:.5}), delta1 {:.6} (se {:.6}), {} workers",
                fit.delta0,
                fit.cluster_se.0,
                fit.delta1,
                fit.cluster_se.1,
                signals.signals.len()
            );
            Ok(0)
        }
        Command::Learn {
            signals,
            cov,
            panel,
            families,
            folds,
            seed,
            out,
        } => {
            let panel_loaded = match &panel {
                Some(p) => Some(Panel::read_csv_path(p)?),
                None => None,
            };
            let (_, cm) = stages::load_covariates(
                &cov.covariates,
                &cov.schema,
                panel_loaded.as_ref(),
                cov.missing_indicator_threshold,
                !cov.unweighted_standardization,
            )?;
            // Signals CSV carries worker-level weights already.
            let rows = read_signals_csv(&signals)?;
            let sig = SkillSignals {
                signals: rows
                    .into_iter()
                    .map(|(worker_id, zhat, n_years, weight)| SkillSignal {
                        worker_id,
                        zhat,
                        n_years,
                        province: 0,
                        weight,
                        mover: false,
                    })
                    .collect(),
                n_zero_weight_excluded: 0,
            };
            let train = TrainingSet::from_signals(&sig, &cm)?;
            let fold_assignment = make_folds(train.n(), folds, seed)?;
            let fams = stages::parse_families(&families)?;
            stages::ensure_dir(&out)?;
            let grids = LearnGrids::default();
            let mut trained = Vec::new();
            for fam in fams {
                let t = train_family(fam, &train, &fold_assignment, &grids, seed)?;
                t.model.save_json(&out.join(format!("model_{}.json", fam.as_str())))?;
                println!(
                    "learn {}: in-sample R2 {:.4}, oof R2 {:.4}",
                    fam.as_str(),
                    t.model.diagnostics.in_sample_r2,
                    t.model.diagnostics.oof_r2_mean
                );
                trained.push((fam, t));
            }
            let metrics = stages::learn_metrics(&trained, train.n(), folds, seed);
            stages::write_json_pretty(&metrics, &out.join("metrics.json"))?;
            Ok(0)
        }
        Command::Predict {
            model,
            cov,
            panel,
            out,
        } => {
            let panel_loaded = match &panel {
                Some(p) => Some(Panel::read_csv_path(p)?),
                None => None,
            };
            let (_, cm) = stages::load_covariates(
                &cov.covariates,
                &cov.schema,
                panel_loaded.as_ref(),
                cov.missing_indicator_threshold,
                !cov.unweighted_standardization,
            )?;
            let model = LearnerModel::load_json(&model)?;
            let skills = predict_skills(&model, &cm)?;
            skillcast_core::learners::write_skills_csv(&skills, &out)?;
            if let Ok(imp) = variable_importance(&model) {
                let ipath = out.with_extension("importance.csv");
                let mut wtr = csv::Writer::from_path(&ipath)?;
                wtr.write_record(["feature", "importance"])?;
                for (name, v) in &imp {
                    wtr.write_record([name.as_str(), &v.to_string()])?;
                }
                wtr.flush()?;
            }
            println!("predict: {} workers -> {}", skills.len(), out.display());
            Ok(0)
        }
        Command::Selection {
            skills,
            labels,
            split_year,
            sigma,
            lambda,
            cv,
            seed,
            out,
        } => {
            let panel = Panel::read_csv_path(&labels)?;
            let skills = skillcast_core::learners::read_skills_csv(&skills)?;
            let cfg = SelectionRuleConfig {
                sigma,
                lambda,
                split_year,
                seed,
                cv,
                ..SelectionRuleConfig::default()
            };
            let report = skillcast_core::density_ratio::selection_rule_report(
                &skills, &panel, &cfg,
            )?;
            report.write_csv(&out)?;
            println!(
                "selection: sigma {:.3}, lambda {:.3}, {} grid points -> {}",
                report.sigma,
                report.lambda,
                report.grid.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Heckman {
            input,
            cov,
            price,
            instrument,
            seed,
            out,
        } => {
            let panel = input.load()?;
            let (_, cm) = stages::load_covariates(
                &cov.covariates,
                &cov.schema,
                Some(&panel),
                cov.missing_indicator_threshold,
                !cov.unweighted_standardization,
            )?;
            let series = load_price(&price)?;
            let cfg = HeckmanConfig {
                instrument,
                seed,
                ..HeckmanConfig::default()
            };
            let outcome = heckman_correction(&panel, &cm, &series, &cfg)?;
            stages::ensure_dir(&out)?;
            write_signals_csv(&outcome.corrected_signals, &out.join("corrected_signals.csv"))?;
            #[derive(serde::Serialize)]
            struct Summary {
                gamma_imr: f64,
                gamma_se: f64,
                delta0: f64,
                delta1: f64,
                first_stage_wald: f64,
                first_stage_p: f64,
                exclusion_wald: f64,
                exclusion_p: f64,
            }
            stages::write_json_pretty(
                &Summary {
                    gamma_imr: outcome.gamma_imr,
                    gamma_se: outcome.gamma_se,
                    delta0: outcome.delta0,
                    delta1: outcome.delta1,
                    first_stage_wald: outcome.probit.wald_instrument,
                    first_stage_p: outcome.probit.p_value,
                    exclusion_wald: outcome.exclusion_wald,
                    exclusion_p: outcome.exclusion_p,
                },
                &out.join("summary.json"),
            )?;
            println!(
                "heckman: gamma {:.4} (se {:.4}), first-stage Wald {:.2}, exclusion p {:.3}",
                outcome.gamma_imr,
                outcome.gamma_se,
                outcome.probit.wald_instrument,
                outcome.exclusion_p
            );
            Ok(0)
        }
        Command::Factors {
            input,
            price,
            min_cell,
            out,
        } => {
            let panel = input.load()?;
            let series = load_price(&price)?;
            let cfg = skillcast_core::cce::FactorConfig {
                min_cell,
                ..skillcast_core::cce::FactorConfig::default()
            };
            let outcome = skillcast_core::cce::factor_analysis(&panel, &series, &cfg)?;
            skillcast_core::cce::write_factors_csv(&outcome, &out)?;
            let path_csv = out.with_extension("path.csv");
            skillcast_core::cce::write_factor_path_csv(&outcome.fit, &path_csv)?;
            println!(
                "factors: {} levels, {} workers, {} skipped",
                outcome.fit.levels.len(),
                outcome.loadings.len(),
                outcome.n_skipped
            );
            Ok(0)
        }
        Command::Analyze {
            input,
            skills,
            profile_json,
            tables,
            jobfix_occupation,
            jobfix_sector,
            out,
        } => {
            if tables != "all" {
                return Err(Error::invalid("only --tables all is supported"));
            }
            let panel = input.load()?;
            let skills_vec = skillcast_core::learners::read_skills_csv(&skills)?;
            let skills_map: HashMap<String, f64> = skills_vec.into_iter().collect();
            let profile: ProfileFit = match &profile_json {
                Some(p) => stages::read_json(p)?,
                None => ProfileFit {
                    delta0: 0.0,
                    delta1: 0.0,
                    cluster_se: (0.0, 0.0),
                    n_obs: 0,
                    n_workers: 0,
                    within_r2: 0.0,
                },
            };
            let input = AnalysisInput {
                panel: &panel,
                skills: &skills_map,
                profile: &profile,
                age_range: DEFAULT_AGE_RANGE,
            };
            stages::ensure_dir(&out)?;
            informativeness_tables(&input)?.write_csv(&out.join("informativeness.csv"))?;
            let (premium, gender) = premium_and_gender_tables(&input)?;
            premium.write_csv(&out.join("premium.csv"))?;
            gender.write_csv(&out.join("gender_gap.csv"))?;
            let jobfix = jobfix_skills(&input, (&jobfix_occupation, &jobfix_sector))?;
            relative_skill_series(&input, SeriesBy::Year, &skills_map)?
                .write_csv(&out.join("relative_by_year.csv"))?;
            relative_skill_series(&input, SeriesBy::CohortBin, &jobfix)?
                .write_csv(&out.join("relative_by_cohort_jobfix.csv"))?;
            for min_obs in [0usize, 10, 25, 50] {
                let table = build_cohort_table(&input, &jobfix, min_obs)?;
                if let Ok(t) = cohort_hiring_regression(&table) {
                    t.write_csv(&out.join(format!("cohort_hiring_min{min_obs}.csv")))?;
                }
            }
            println!("analyze: tables written to {}", out.display());
            Ok(0)
        }
        Command::Pipeline {
            config,
            out_dir,
            seed,
        } => {
            let manifest = skillcast_cli::pipeline::run_from_config_path(
                &config,
                out_dir.as_deref(),
                seed,
                None,
            )?;
            match &manifest.failed_stage {
                Some(stage) => {
                    eprintln!("skillcast: stage {stage} failed; see manifest.json");
                    Ok(EXIT_STAGE)
                }
                None => {
                    println!("pipeline: complete; manifest written");
                    Ok(0)
                }
            }
        }
    }
}
