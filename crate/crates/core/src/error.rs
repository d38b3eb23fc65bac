use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Numerical failures carry enough context to name
/// the offending column, year, or cell.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate observation for worker {worker_id} in year {year}")]
    DuplicateObservation { worker_id: String, year: i32 },

    #[error("weighted variance of the outcome is zero; R^2 undefined")]
    ZeroVariance,

    #[error("design matrix is rank deficient; dropped columns: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("perfect separation detected; separating feature: {feature}")]
    PerfectSeparation { feature: String },

    #[error("{what} did not converge after {iterations} iterations (criterion {criterion:.3e})")]
    NotConverged {
        what: String,
        iterations: usize,
        criterion: f64,
    },

    #[error("no flat-spot wage changes for the transition into year {year}")]
    SeriesGap { year: i32 },

    #[error("price series does not cover panel year {year}")]
    PriceYearMissing { year: i32 },

    #[error("no within-worker variation: every worker observed in a single year")]
    NoWithinVariation,

    #[error("fold count {k} exceeds number of workers {n}")]
    TooManyFolds { k: usize, n: usize },

    #[error("empty hyperparameter grid")]
    EmptyGrid,

    #[error("covariate schema mismatch: {0:?}")]
    SchemaMismatch(Vec<String>),

    #[error("empty cell: {0}")]
    EmptyCell(String),

    #[error("kernel system singular even after deduplicating centers")]
    SingularKernelSystem,

    #[error("selection correction unidentified: inverse Mills ratio has no variation")]
    ImrConstant,

    #[error("experience factors unidentifiable: {0}")]
    FactorsUnidentified(String),

    #[error("too few cohorts after filtering: {n_cohorts} (need at least {min})")]
    TooFewCohorts { n_cohorts: usize, min: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
