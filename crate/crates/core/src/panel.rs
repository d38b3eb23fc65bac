//! Worker-year panel and worker-level covariate containers.
//!
//! A `Panel` owns its observations sorted by `(worker, year)` together
//! with an index of per-worker ranges; categorical labels are interned so
//! downstream fixed-effect code works on dense codes. Both containers are
//! immutable after construction and safe to share across threads.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Government,
    Private,
    Other,
}

impl Group {
    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Government => "government",
            Group::Private => "private",
            Group::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Result<Group> {
        match s {
            "government" => Ok(Group::Government),
            "private" => Ok(Group::Private),
            "other" => Ok(Group::Other),
            _ => Err(Error::invalid(format!("unknown group label: {s:?}"))),
        }
    }
}

/// Interned categorical dictionary: code -> label.
#[derive(Debug, Clone, Default)]
pub struct Dict {
    labels: Vec<String>,
    lookup: HashMap<String, u16>,
}

impl Dict {
    pub fn intern(&mut self, label: &str) -> u16 {
        if let Some(&c) = self.lookup.get(label) {
            return c;
        }
        let code = self.labels.len() as u16;
        self.labels.push(label.to_string());
        self.lookup.insert(label.to_string(), code);
        code
    }

    pub fn label(&self, code: u16) -> &str {
        &self.labels[code as usize]
    }

    pub fn code(&self, label: &str) -> Option<u16> {
        self.lookup.get(label).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One worker-year row. Categorical fields are codes into the panel's
/// dictionaries; `analysis_weight` starts equal to `survey_weight` and is
/// replaced by the propensity stage.
#[derive(Debug, Clone)]
pub struct Obs {
    pub worker: u32,
    pub year: i32,
    pub log_wage: f64,
    pub experience: f64,
    pub group: Group,
    pub occupation: u16,
    pub sector: u16,
    pub province: u16,
    pub birth_year: i32,
    pub male: bool,
    pub survey_weight: f64,
    pub analysis_weight: f64,
}

/// Input record with string labels, consumed by `PanelBuilder`.
#[derive(Debug, Clone)]
pub struct ObsRecord {
    pub worker_id: String,
    pub year: i32,
    pub log_wage: f64,
    pub experience: f64,
    pub group: Group,
    pub occupation: String,
    pub sector: String,
    pub province: String,
    pub birth_year: i32,
    pub male: bool,
    pub survey_weight: f64,
}

#[derive(Debug, Clone)]
pub struct Panel {
    workers: Vec<String>,
    worker_lookup: HashMap<String, u32>,
    observations: Vec<Obs>,
    /// Per-worker contiguous range into `observations`.
    worker_ranges: Vec<std::ops::Range<usize>>,
    pub occupations: Dict,
    pub sectors: Dict,
    pub provinces: Dict,
}

#[derive(Debug, Default)]
pub struct PanelBuilder {
    records: Vec<ObsRecord>,
}

impl PanelBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: ObsRecord) {
        self.records.push(rec);
    }

    pub fn finish(self) -> Result<Panel> {
        let mut workers: Vec<String> = Vec::new();
        let mut worker_lookup: HashMap<String, u32> = HashMap::new();
        let mut occupations = Dict::default();
        let mut sectors = Dict::default();
        let mut provinces = Dict::default();

        let mut obs: Vec<Obs> = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if r.experience < 0.0 {
                return Err(Error::invalid(format!(
                    "negative experience for worker {} in {}",
                    r.worker_id, r.year
                )));
            }
            if !(r.survey_weight > 0.0) {
                return Err(Error::invalid(format!(
                    "non-positive survey weight for worker {} in {}",
                    r.worker_id, r.year
                )));
            }
            let worker = match worker_lookup.get(&r.worker_id) {
                Some(&w) => w,
                None => {
                    let w = workers.len() as u32;
                    workers.push(r.worker_id.clone());
                    worker_lookup.insert(r.worker_id.clone(), w);
                    w
                }
            };
            obs.push(Obs {
                worker,
                year: r.year,
                log_wage: r.log_wage,
                experience: r.experience,
                group: r.group,
                occupation: occupations.intern(&r.occupation),
                sector: sectors.intern(&r.sector),
                province: provinces.intern(&r.province),
                birth_year: r.birth_year,
                male: r.male,
                survey_weight: r.survey_weight,
                analysis_weight: r.survey_weight,
            });
        }
        obs.sort_by(|a, b| (a.worker, a.year).cmp(&(b.worker, b.year)));
        let mut worker_ranges = vec![0..0; workers.len()];
        let mut i = 0;
        while i < obs.len() {
            let w = obs[i].worker;
            let start = i;
            while i < obs.len() && obs[i].worker == w {
                if i > start && obs[i].year == obs[i - 1].year {
                    return Err(Error::DuplicateObservation {
                        worker_id: workers[w as usize].clone(),
                        year: obs[i].year,
                    });
                }
                i += 1;
            }
            worker_ranges[w as usize] = start..i;
        }
        Ok(Panel {
            workers,
            worker_lookup,
            observations: obs,
            worker_ranges,
            occupations,
            sectors,
            provinces,
        })
    }
}

impl Panel {
    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn observations(&self) -> &[Obs] {
        &self.observations
    }

    pub fn worker_id(&self, worker: u32) -> &str {
        &self.workers[worker as usize]
    }

    pub fn worker_ids(&self) -> &[String] {
        &self.workers
    }

    pub fn worker_code(&self, worker_id: &str) -> Option<u32> {
        self.worker_lookup.get(worker_id).copied()
    }

    pub fn worker_obs(&self, worker: u32) -> &[Obs] {
        &self.observations[self.worker_ranges[worker as usize].clone()]
    }

    /// Calendar years present, sorted ascending.
    pub fn years(&self) -> Vec<i32> {
        let mut ys: Vec<i32> = self.observations.iter().map(|o| o.year).collect();
        ys.sort_unstable();
        ys.dedup();
        ys
    }

    /// Replace analysis weights; `weights` is aligned with `observations()`.
    pub fn set_analysis_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.observations.len() {
            return Err(Error::invalid("analysis weight length mismatch"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("analysis weights must be >= 0"));
        }
        for (o, &w) in self.observations.iter_mut().zip(weights) {
            o.analysis_weight = w;
        }
        Ok(())
    }

    /// Mutable access for generators; invariants are the caller's problem.
    pub(crate) fn observations_mut(&mut self) -> &mut [Obs] {
        &mut self.observations
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "worker_id",
        "year",
        "log_wage",
        "experience",
        "group",
        "occupation",
        "sector",
        "province",
        "birth_year",
        "male",
        "survey_weight",
    ];

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(Self::CSV_HEADER)?;
        for o in &self.observations {
            wtr.write_record([
                self.worker_id(o.worker),
                &o.year.to_string(),
                &o.log_wage.to_string(),
                &o.experience.to_string(),
                o.group.as_str(),
                self.occupations.label(o.occupation),
                self.sectors.label(o.sector),
                self.provinces.label(o.province),
                &o.birth_year.to_string(),
                if o.male { "1" } else { "0" },
                &o.survey_weight.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Panel> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let expected: Vec<&str> = Self::CSV_HEADER.to_vec();
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::invalid(format!(
                "panel csv header mismatch: expected {expected:?}, got {got:?}"
            )));
        }
        let mut builder = PanelBuilder::new();
        for row in rdr.records() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or("");
            let num = |i: usize, name: &str| -> Result<f64> {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad {name}: {:?}", field(i))))
            };
            builder.push(ObsRecord {
                worker_id: field(0).to_string(),
                year: field(1)
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad year: {:?}", field(1))))?,
                log_wage: num(2, "log_wage")?,
                experience: num(3, "experience")?,
                group: Group::parse(field(4))?,
                occupation: field(5).to_string(),
                sector: field(6).to_string(),
                province: field(7).to_string(),
                birth_year: field(8)
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad birth_year: {:?}", field(8))))?,
                male: matches!(field(9), "1" | "true"),
                survey_weight: num(10, "survey_weight")?,
            });
        }
        builder.finish()
    }

    pub fn read_csv_path(path: &Path) -> Result<Panel> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarKind {
    Continuous,
    Dummy,
}

/// One raw covariate column with missing cells.
#[derive(Debug, Clone)]
pub struct RawVariable {
    pub name: String,
    pub kind: VarKind,
    /// Marks education-background dummies consumed by the benchmark OLS
    /// learner.
    pub education: bool,
    pub values: Vec<Option<f64>>,
}

/// Worker-by-variable table before standardization.
#[derive(Debug, Clone)]
pub struct RawCovariates {
    pub worker_ids: Vec<String>,
    pub variables: Vec<RawVariable>,
}

pub const DEFAULT_MISSING_INDICATOR_THRESHOLD: usize = 1000;

/// Per-worker matrix of preprocessed covariates: standardized continuous
/// block, dummy block, and missing-indicator columns for dummies whose
/// missing count reached the threshold.
#[derive(Debug, Clone)]
pub struct CovariateMatrix {
    pub worker_ids: Vec<String>,
    worker_lookup: HashMap<String, usize>,
    pub continuous: Matrix,
    pub continuous_names: Vec<String>,
    pub dummies: Matrix,
    pub dummy_names: Vec<String>,
    pub indicators: Matrix,
    pub indicator_names: Vec<String>,
    /// Missingness flags aligned `[continuous | dummies]`.
    pub missing: Vec<Vec<bool>>,
    pub education_names: Vec<String>,
    pub warnings: Vec<String>,
}

impl CovariateMatrix {
    pub fn n_workers(&self) -> usize {
        self.worker_ids.len()
    }

    pub fn row_of(&self, worker_id: &str) -> Option<usize> {
        self.worker_lookup.get(worker_id).copied()
    }

    /// Full feature block `[continuous | dummies | indicators]` with names.
    pub fn feature_matrix(&self) -> (Matrix, Vec<String>) {
        let n = self.n_workers();
        let p = self.continuous.cols + self.dummies.cols + self.indicators.cols;
        let mut m = Matrix::zeros(n, p);
        for i in 0..n {
            let mut j = 0;
            for c in 0..self.continuous.cols {
                m[(i, j)] = self.continuous[(i, c)];
                j += 1;
            }
            for c in 0..self.dummies.cols {
                m[(i, j)] = self.dummies[(i, c)];
                j += 1;
            }
            for c in 0..self.indicators.cols {
                m[(i, j)] = self.indicators[(i, c)];
                j += 1;
            }
        }
        let mut names = self.continuous_names.clone();
        names.extend(self.dummy_names.iter().cloned());
        names.extend(self.indicator_names.iter().cloned());
        (m, names)
    }

    /// Reconstruct the raw table (values + missingness) this matrix was
    /// built from, in standardized units. Feeding it back through
    /// `preprocess_covariates` reproduces the matrix.
    pub fn to_raw(&self) -> RawCovariates {
        let n = self.n_workers();
        let mut variables = Vec::new();
        for (c, name) in self.continuous_names.iter().enumerate() {
            let values = (0..n)
                .map(|i| {
                    if self.missing[i][c] {
                        None
                    } else {
                        Some(self.continuous[(i, c)])
                    }
                })
                .collect();
            variables.push(RawVariable {
                name: name.clone(),
                kind: VarKind::Continuous,
                education: false,
                values,
            });
        }
        let pc = self.continuous_names.len();
        for (c, name) in self.dummy_names.iter().enumerate() {
            let values = (0..n)
                .map(|i| {
                    if self.missing[i][pc + c] {
                        None
                    } else {
                        Some(self.dummies[(i, c)])
                    }
                })
                .collect();
            variables.push(RawVariable {
                name: name.clone(),
                kind: VarKind::Dummy,
                education: self.education_names.contains(name),
                values,
            });
        }
        RawCovariates {
            worker_ids: self.worker_ids.clone(),
            variables,
        }
    }
}

/// Standardize and impute a raw covariate table.
///
/// Continuous variables are z-standardized with the weighted population
/// SD (denominator sum of weights) over their non-missing cells, pooling
/// across all workers, then missing cells become exactly zero. Dummy
/// missings become zero, and any dummy with at least
/// `missing_indicator_threshold` missing cells gains a `<name>_missing`
/// indicator column. Zero-variance continuous columns are kept as all
/// zeros with a warning so column indices stay stable across subsamples.
///
/// `weights` are per-worker standardization weights; `None` means
/// unweighted.
pub fn preprocess_covariates(
    raw: &RawCovariates,
    missing_indicator_threshold: usize,
    weights: Option<&[f64]>,
) -> Result<CovariateMatrix> {
    let n = raw.worker_ids.len();
    if n == 0 || raw.variables.is_empty() {
        return Err(Error::invalid(
            "preprocess_covariates: need at least one worker and one variable",
        ));
    }
    let w_storage;
    let w: &[f64] = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::invalid("covariate weight length mismatch"));
            }
            w
        }
        None => {
            w_storage = vec![1.0; n];
            &w_storage
        }
    };

    let mut continuous_cols: Vec<Vec<f64>> = Vec::new();
    let mut continuous_names = Vec::new();
    let mut dummy_cols: Vec<Vec<f64>> = Vec::new();
    let mut dummy_names = Vec::new();
    let mut indicator_cols: Vec<Vec<f64>> = Vec::new();
    let mut indicator_names = Vec::new();
    let mut missing: Vec<Vec<bool>> = vec![Vec::new(); n];
    let mut education_names = Vec::new();
    let mut warnings = Vec::new();

    // Continuous block first so missingness flags align [continuous | dummies].
    for var in raw.variables.iter().filter(|v| v.kind == VarKind::Continuous) {
        if var.values.len() != n {
            return Err(Error::invalid(format!("column {} has wrong length", var.name)));
        }
        let mut sw = 0.0;
        let mut sum = 0.0;
        for (i, v) in var.values.iter().enumerate() {
            if let Some(x) = v {
                sw += w[i];
                sum += w[i] * x;
            }
        }
        let col = if sw > 0.0 {
            let mean = sum / sw;
            let mut ss = 0.0;
            for (i, v) in var.values.iter().enumerate() {
                if let Some(x) = v {
                    ss += w[i] * (x - mean) * (x - mean);
                }
            }
            let sd = (ss / sw).sqrt();
            if sd == 0.0 {
                warnings.push(format!("degenerate continuous column {}: zero variance", var.name));
                vec![0.0; n]
            } else {
                var.values
                    .iter()
                    .map(|v| v.map(|x| (x - mean) / sd).unwrap_or(0.0))
                    .collect()
            }
        } else {
            warnings.push(format!("degenerate continuous column {}: all missing", var.name));
            vec![0.0; n]
        };
        for (i, v) in var.values.iter().enumerate() {
            missing[i].push(v.is_none());
        }
        continuous_cols.push(col);
        continuous_names.push(var.name.clone());
    }

    for var in raw.variables.iter().filter(|v| v.kind == VarKind::Dummy) {
        if var.values.len() != n {
            return Err(Error::invalid(format!("column {} has wrong length", var.name)));
        }
        let col: Vec<f64> = var.values.iter().map(|v| v.unwrap_or(0.0)).collect();
        let n_missing = var.values.iter().filter(|v| v.is_none()).count();
        for (i, v) in var.values.iter().enumerate() {
            missing[i].push(v.is_none());
        }
        if n_missing >= missing_indicator_threshold {
            indicator_cols.push(
                var.values
                    .iter()
                    .map(|v| if v.is_none() { 1.0 } else { 0.0 })
                    .collect(),
            );
            indicator_names.push(format!("{}_missing", var.name));
        }
        if var.education {
            education_names.push(var.name.clone());
        }
        dummy_cols.push(col);
        dummy_names.push(var.name.clone());
    }

    let worker_lookup = raw
        .worker_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();

    Ok(CovariateMatrix {
        worker_ids: raw.worker_ids.clone(),
        worker_lookup,
        continuous: Matrix::from_columns(&continuous_cols),
        continuous_names,
        dummies: Matrix::from_columns(&dummy_cols),
        dummy_names,
        indicators: if indicator_cols.is_empty() {
            Matrix::zeros(n, 0)
        } else {
            Matrix::from_columns(&indicator_cols)
        },
        indicator_names,
        missing,
        education_names,
        warnings,
    })
}

/// Sidecar schema for the covariate CSV.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CovariateSchema {
    pub columns: Vec<CovariateColumnSchema>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CovariateColumnSchema {
    pub name: String,
    pub kind: VarKind,
    #[serde(default)]
    pub education: bool,
}

/// Write raw covariates as `worker_id` plus one column per variable,
/// missing cells empty, with the sidecar schema JSON next to it.
pub fn write_covariates_csv(raw: &RawCovariates, csv_path: &Path, schema_path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["worker_id".to_string()];
    header.extend(raw.variables.iter().map(|v| v.name.clone()));
    wtr.write_record(&header)?;
    for (i, id) in raw.worker_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        for var in &raw.variables {
            rec.push(var.values[i].map(|x| x.to_string()).unwrap_or_default());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    let schema = CovariateSchema {
        columns: raw
            .variables
            .iter()
            .map(|v| CovariateColumnSchema {
                name: v.name.clone(),
                kind: v.kind,
                education: v.education,
            })
            .collect(),
    };
    let f = std::fs::File::create(schema_path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &schema)?;
    Ok(())
}

pub fn read_covariates_csv(csv_path: &Path, schema_path: &Path) -> Result<RawCovariates> {
    let schema: CovariateSchema = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(schema_path)?,
    ))?;
    let mut rdr = csv::Reader::from_path(csv_path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("worker_id") {
        return Err(Error::invalid("covariate csv must start with worker_id"));
    }
    let names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let mut by_name: HashMap<&str, &CovariateColumnSchema> = HashMap::new();
    for c in &schema.columns {
        by_name.insert(&c.name, c);
    }
    let mut worker_ids = Vec::new();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); names.len()];
    for row in rdr.records() {
        let row = row?;
        worker_ids.push(row.get(0).unwrap_or("").to_string());
        for (j, col) in columns.iter_mut().enumerate() {
            let cell = row.get(j + 1).unwrap_or("");
            if cell.is_empty() {
                col.push(None);
            } else {
                col.push(Some(cell.parse::<f64>().map_err(|_| {
                    Error::invalid(format!("bad value {:?} in column {}", cell, names[j]))
                })?));
            }
        }
    }
    let variables = names
        .iter()
        .zip(columns)
        .map(|(name, values)| {
            let meta = by_name.get(name.as_str()).ok_or_else(|| {
                Error::invalid(format!("column {name} missing from covariate schema"))
            })?;
            Ok(RawVariable {
                name: name.clone(),
                kind: meta.kind,
                education: meta.education,
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawCovariates {
        worker_ids,
        variables,
    })
}

/// Weighted mean survey weight per worker, aligned with `worker_ids()`.
pub fn worker_mean_survey_weights(panel: &Panel) -> Vec<f64> {
    (0..panel.n_workers() as u32)
        .map(|w| {
            let obs = panel.worker_obs(w);
            obs.iter().map(|o| o.survey_weight).sum::<f64>() / obs.len() as f64
        })
        .collect()
}

/// Descriptive helper mirroring the winsorized relative-wage summaries.
pub fn winsorized_relative_wages(panel: &Panel, lower_pct: f64, upper_pct: f64) -> Vec<f64> {
    let logs: Vec<f64> = panel.observations().iter().map(|o| o.log_wage).collect();
    let w: Vec<f64> = panel
        .observations()
        .iter()
        .map(|o| o.survey_weight)
        .collect();
    stats::winsorize_logs(&logs, lower_pct, upper_pct, &w)
        .into_iter()
        .map(f64::exp)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, year: i32) -> ObsRecord {
        ObsRecord {
            worker_id: id.to_string(),
            year,
            log_wage: 1.0,
            experience: 2.0,
            group: Group::Private,
            occupation: "clerk".into(),
            sector: "services".into(),
            province: "p1".into(),
            birth_year: 1970,
            male: true,
            survey_weight: 1.0,
        }
    }

    #[test]
    fn builder_rejects_duplicates() {
        let mut b = PanelBuilder::new();
        b.push(record("w1", 1990));
        b.push(record("w1", 1990));
        assert!(matches!(
            b.finish(),
            Err(Error::DuplicateObservation { .. })
        ));
    }

    #[test]
    fn worker_years_sorted_strictly_increasing() {
        let mut b = PanelBuilder::new();
        b.push(record("w1", 1992));
        b.push(record("w2", 1990));
        b.push(record("w1", 1990));
        let panel = b.finish().unwrap();
        let w1 = panel.worker_code("w1").unwrap();
        let years: Vec<i32> = panel.worker_obs(w1).iter().map(|o| o.year).collect();
        assert_eq!(years, vec![1990, 1992]);
        assert_eq!(panel.n_workers(), 2);
        // Index covers exactly the observations.
        let covered: usize = (0..panel.n_workers() as u32)
            .map(|w| panel.worker_obs(w).len())
            .sum();
        assert_eq!(covered, panel.n_obs());
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let mut b = PanelBuilder::new();
        let mut r = record("w1", 1990);
        r.log_wage = 1.2345678901234567;
        r.experience = 0.1;
        b.push(r);
        b.push(record("w2", 1991));
        let panel = b.finish().unwrap();
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        let back = Panel::read_csv(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        back.write_csv(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(back.n_obs(), panel.n_obs());
        assert_eq!(back.observations()[0].log_wage, 1.2345678901234567);
    }

    fn raw_one_column(kind: VarKind, values: Vec<Option<f64>>) -> RawCovariates {
        RawCovariates {
            worker_ids: (0..values.len()).map(|i| format!("w{i}")).collect(),
            variables: vec![RawVariable {
                name: "x".into(),
                kind,
                education: false,
                values,
            }],
        }
    }

    #[test]
    fn standardizes_with_population_sd() {
        let raw = raw_one_column(
            VarKind::Continuous,
            vec![Some(1.0), Some(2.0), Some(3.0)],
        );
        let cm = preprocess_covariates(&raw, 1000, None).unwrap();
        let col = cm.continuous.column(0);
        // Hand-computed: mean 2, population SD sqrt(2/3).
        let sd = (2.0f64 / 3.0).sqrt();
        assert!((col[0] - (-1.0 / sd)).abs() < 1e-12);
        assert!((col[0] + 1.224744871391589).abs() < 1e-12);
        assert!(col[1].abs() < 1e-12);
        assert!((col[2] - 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn all_missing_dummy_gets_indicator_of_ones() {
        let raw = raw_one_column(VarKind::Dummy, vec![None, None, None]);
        let cm = preprocess_covariates(&raw, 3, None).unwrap();
        assert_eq!(cm.dummies.column(0), vec![0.0; 3]);
        assert_eq!(cm.indicator_names, vec!["x_missing".to_string()]);
        assert_eq!(cm.indicators.column(0), vec![1.0; 3]);
    }

    #[test]
    fn indicator_threshold_is_strict() {
        // 999 missing with threshold 1000: no indicator.
        let mut values = vec![None; 999];
        values.extend(vec![Some(1.0); 600]);
        let raw = raw_one_column(VarKind::Dummy, values);
        let cm = preprocess_covariates(&raw, 1000, None).unwrap();
        assert!(cm.indicator_names.is_empty());
        // Exactly 1000 missing: indicator appears.
        let mut values = vec![None; 1000];
        values.extend(vec![Some(1.0); 600]);
        let raw = raw_one_column(VarKind::Dummy, values);
        let cm = preprocess_covariates(&raw, 1000, None).unwrap();
        assert_eq!(cm.indicator_names.len(), 1);
    }

    #[test]
    fn zero_variance_column_kept_as_zeros_with_warning() {
        let raw = raw_one_column(
            VarKind::Continuous,
            vec![Some(5.0), Some(5.0), Some(5.0)],
        );
        let cm = preprocess_covariates(&raw, 1000, None).unwrap();
        assert_eq!(cm.continuous.column(0), vec![0.0; 3]);
        assert_eq!(cm.warnings.len(), 1);
    }

    #[test]
    fn standardized_moments_and_imputed_zeros() {
        let raw = RawCovariates {
            worker_ids: (0..6).map(|i| format!("w{i}")).collect(),
            variables: vec![RawVariable {
                name: "score".into(),
                kind: VarKind::Continuous,
                education: false,
                values: vec![Some(1.0), Some(4.0), None, Some(2.5), Some(9.0), None],
            }],
        };
        let w = vec![1.0, 2.0, 1.0, 0.5, 1.5, 3.0];
        let cm = preprocess_covariates(&raw, 1000, Some(&w)).unwrap();
        let col = cm.continuous.column(0);
        assert_eq!(col[2], 0.0);
        assert_eq!(col[5], 0.0);
        // Weighted mean ~ 0 and weighted variance ~ 1 over the
        // standardization sample (non-missing cells).
        let keep = [0usize, 1, 3, 4];
        let vals: Vec<f64> = keep.iter().map(|&i| col[i]).collect();
        let ws: Vec<f64> = keep.iter().map(|&i| w[i]).collect();
        assert!(stats::weighted_mean(&vals, &ws).abs() < 1e-8);
        assert!((stats::weighted_var(&vals, &ws) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn preprocess_idempotent_on_own_output() {
        let raw = RawCovariates {
            worker_ids: (0..5).map(|i| format!("w{i}")).collect(),
            variables: vec![
                RawVariable {
                    name: "score".into(),
                    kind: VarKind::Continuous,
                    education: false,
                    values: vec![Some(1.0), Some(4.0), None, Some(2.5), Some(9.0)],
                },
                RawVariable {
                    name: "flag".into(),
                    kind: VarKind::Dummy,
                    education: false,
                    values: vec![Some(1.0), None, Some(0.0), None, Some(1.0)],
                },
            ],
        };
        let w = vec![1.0, 2.0, 1.0, 0.5, 1.5];
        let first = preprocess_covariates(&raw, 2, Some(&w)).unwrap();
        let second = preprocess_covariates(&first.to_raw(), 2, Some(&w)).unwrap();
        for j in 0..first.continuous.cols {
            let a = first.continuous.column(j);
            let b = second.continuous.column(j);
            for i in 0..a.len() {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
        assert_eq!(first.dummies, second.dummies);
        assert_eq!(first.indicator_names, second.indicator_names);
        assert_eq!(first.indicators, second.indicators);
    }

    #[test]
    fn covariate_csv_round_trip() {
        let raw = RawCovariates {
            worker_ids: vec!["a".into(), "b".into()],
            variables: vec![
                RawVariable {
                    name: "score".into(),
                    kind: VarKind::Continuous,
                    education: false,
                    values: vec![Some(1.25), None],
                },
                RawVariable {
                    name: "edu_higher".into(),
                    kind: VarKind::Dummy,
                    education: true,
                    values: vec![Some(1.0), Some(0.0)],
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("cov.csv");
        let schema_path = dir.path().join("cov.schema.json");
        write_covariates_csv(&raw, &csv_path, &schema_path).unwrap();
        let back = read_covariates_csv(&csv_path, &schema_path).unwrap();
        assert_eq!(back.worker_ids, raw.worker_ids);
        assert_eq!(back.variables.len(), 2);
        assert_eq!(back.variables[0].values, raw.variables[0].values);
        assert!(back.variables[1].education);
    }
}
