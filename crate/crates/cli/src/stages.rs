//! Shared stage helpers used by both the standalone subcommands and the
//! pipeline runner.

use std::collections::BTreeMap;
use std::path::Path;

use skillcast_core::learners::{LearnerFamily, TrainedFamily};
use skillcast_core::panel::{
    preprocess_covariates, read_covariates_csv, worker_mean_survey_weights, CovariateMatrix,
    Panel, RawCovariates,
};
use skillcast_core::{Error, Result};

/// Load the raw covariate table plus its preprocessed matrix. When a
/// panel is given, standardization is weighted by each worker's mean
/// survey weight; otherwise unweighted.
pub fn load_covariates(
    cov_path: &Path,
    schema_path: &Path,
    panel: Option<&Panel>,
    threshold: usize,
    weighted: bool,
) -> Result<(RawCovariates, CovariateMatrix)> {
    let raw = read_covariates_csv(cov_path, schema_path)?;
    let cm = preprocess_matrix(&raw, panel, threshold, weighted)?;
    Ok((raw, cm))
}

pub fn preprocess_matrix(
    raw: &RawCovariates,
    panel: Option<&Panel>,
    threshold: usize,
    weighted: bool,
) -> Result<CovariateMatrix> {
    let weights = match (panel, weighted) {
        (Some(p), true) => {
            let by_worker = worker_mean_survey_weights(p);
            Some(
                raw.worker_ids
                    .iter()
                    .map(|id| {
                        p.worker_code(id)
                            .map(|c| by_worker[c as usize])
                            .unwrap_or(1.0)
                    })
                    .collect::<Vec<f64>>(),
            )
        }
        _ => None,
    };
    preprocess_covariates(raw, threshold, weights.as_deref())
}

/// Per-family training metrics serialized into metrics.json.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct FamilyMetrics {
    pub in_sample_r2: f64,
    pub oof_r2_mean: f64,
    pub oof_r2_pooled: f64,
    pub hyperparams: serde_json::Value,
    pub fold_fingerprint: String,
    pub configs_evaluated: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct LearnMetrics {
    pub n_workers: usize,
    pub folds: usize,
    pub seed: u64,
    pub families: BTreeMap<String, FamilyMetrics>,
}

pub fn learn_metrics(
    trained: &[(LearnerFamily, TrainedFamily)],
    n_workers: usize,
    folds: usize,
    seed: u64,
) -> LearnMetrics {
    let mut families = BTreeMap::new();
    for (fam, t) in trained {
        families.insert(
            fam.as_str().to_string(),
            FamilyMetrics {
                in_sample_r2: t.model.diagnostics.in_sample_r2,
                oof_r2_mean: t.model.diagnostics.oof_r2_mean,
                oof_r2_pooled: t.model.diagnostics.oof_r2_pooled,
                hyperparams: t.model.hyperparams.clone(),
                fold_fingerprint: format!("{:016x}", t.model.diagnostics.fold_fingerprint),
                configs_evaluated: t.search.len(),
                notes: t.model.notes.clone(),
            },
        );
    }
    LearnMetrics {
        n_workers,
        folds,
        seed,
        families,
    }
}

pub fn parse_families(spec: &str) -> Result<Vec<LearnerFamily>> {
    if spec == "all" {
        return Ok(LearnerFamily::all().to_vec());
    }
    spec.split(',')
        .map(|s| LearnerFamily::parse(s.trim()))
        .collect()
}

pub fn write_json_pretty<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", path.display())))
}
