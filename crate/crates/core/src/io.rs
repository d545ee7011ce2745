//! Cohort CSV loading, model artifact persistence, and score tables.
//!
//! Cohort files are comma-delimited with a mandatory header. The `age`
//! column is required; `id`, `sex` and `dx` are optional; any other column
//! holding numbers becomes a feature (a column in which no cell parses as a
//! number is treated as an annotation and skipped). Once a column is a
//! feature, every cell must be a finite number.
//!
//! Model files start with the line `normative-gp-model v1`, followed by a
//! JSON body and a trailing `sha256 <hex>` line over the body. Floats are
//! written in shortest round-trip form, so reloading is exact by value.

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gp::{FitTrace, JitterLadder, TargetTransform};
use crate::kernels::{KernelForm, KernelParams};
use crate::metrics::ModelConfig;
use crate::preprocess::Standardizer;

pub const MODEL_MAGIC: &str = "normative-gp-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const SCORE_HEADER: [&str; 7] = ["id", "age", "diagnosis", "y_hat", "epsilon", "cov", "cov_w"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sex {
    F,
    M,
}

impl Sex {
    /// Numeric coding for design matrices: F = 0, M = 1.
    pub fn code(self) -> f64 {
        match self {
            Sex::F => 0.0,
            Sex::M => 1.0,
        }
    }

    fn parse(s: &str) -> Option<Sex> {
        match s.to_ascii_uppercase().as_str() {
            "F" | "0" => Some(Sex::F),
            "M" | "1" => Some(Sex::M),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Sex::F => "F",
            Sex::M => "M",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub subject_ids: Vec<String>,
    /// `n_subjects x n_features`.
    pub features: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub age: Vec<f64>,
    pub sex: Option<Vec<Sex>>,
    pub diagnosis: Option<Vec<String>>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.age.len()
    }

    pub fn is_empty(&self) -> bool {
        self.age.is_empty()
    }

    /// Row subset in the given order.
    pub fn select(&self, rows: &[usize]) -> Cohort {
        Cohort {
            subject_ids: rows.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            features: self.features.select_rows(rows),
            feature_names: self.feature_names.clone(),
            age: rows.iter().map(|&i| self.age[i]).collect(),
            sex: self.sex.as_ref().map(|s| rows.iter().map(|&i| s[i]).collect()),
            diagnosis: self.diagnosis.as_ref().map(|d| rows.iter().map(|&i| d[i].clone()).collect()),
        }
    }

    /// Indices of subjects whose diagnosis equals `label`.
    pub fn rows_with_diagnosis(&self, label: &str) -> Vec<usize> {
        match &self.diagnosis {
            Some(d) => d.iter().enumerate().filter(|(_, v)| *v == label).map(|(i, _)| i).collect(),
            None => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.age.len();
        if self.subject_ids.len() != n
            || self.features.nrows() != n
            || self.sex.as_ref().is_some_and(|s| s.len() != n)
            || self.diagnosis.as_ref().is_some_and(|d| d.len() != n)
        {
            return Err(Error::contract("cohort columns have unequal lengths"));
        }
        if self.features.ncols() != self.feature_names.len() {
            return Err(Error::contract("feature name count differs from feature columns"));
        }
        let mut seen = HashSet::new();
        for name in &self.feature_names {
            if !seen.insert(name) {
                return Err(Error::Structure(format!("duplicate feature name {name:?}")));
            }
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("non-finite feature value"));
        }
        if let Some(i) = self.age.iter().position(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::contract(format!("age at row {} must be positive", i + 1)));
        }
        Ok(())
    }
}

/// Column-role mapping for cohort files.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortSchema {
    pub id: String,
    pub age: String,
    pub sex: String,
    pub diagnosis: String,
    /// Explicit feature columns, in this order. `None` takes every other numeric column.
    pub features: Option<Vec<String>>,
}

impl Default for CohortSchema {
    fn default() -> Self {
        CohortSchema {
            id: "id".into(),
            age: "age".into(),
            sex: "sex".into(),
            diagnosis: "dx".into(),
            features: None,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Structure(format!("CSV error near line {row}: {e}"))
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    if cell.is_empty() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: "empty cell".into(),
        });
    }
    let v: f64 = cell.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("{cell:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("{cell:?} is not finite"),
        });
    }
    Ok(v)
}

pub fn load_cohort(path: impl AsRef<Path>, schema: &CohortSchema) -> Result<Cohort> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(file, schema)
}

pub fn read_cohort<R: Read>(reader: R, schema: &CohortSchema) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Structure("empty file: no header row".into()));
    }
    let mut seen = HashSet::new();
    for h in &header {
        if h.is_empty() {
            return Err(Error::Structure("empty column name in header".into()));
        }
        if !seen.insert(h.as_str()) {
            return Err(Error::Structure(format!("duplicate header column {h:?}")));
        }
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    let age_col = find(&schema.age).ok_or_else(|| Error::Structure(format!("missing required column {:?}", schema.age)))?;
    let id_col = find(&schema.id);
    let sex_col = find(&schema.sex);
    let dx_col = find(&schema.diagnosis);

    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>().map_err(csv_error)?;
    if records.is_empty() {
        return Err(Error::Structure("file has a header but no data rows".into()));
    }

    let reserved: HashSet<usize> = [Some(age_col), id_col, sex_col, dx_col].into_iter().flatten().collect();
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names
            .iter()
            .map(|n| find(n).ok_or_else(|| Error::Structure(format!("missing feature column {n:?}"))))
            .collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|c| !reserved.contains(c))
            .filter(|&c| records.iter().any(|r| r[c].parse::<f64>().is_ok()))
            .collect(),
    };

    let n = records.len();
    let mut features = DMatrix::zeros(n, feature_cols.len());
    let mut age = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut sex = sex_col.map(|_| Vec::with_capacity(n));
    let mut dx = dx_col.map(|_| Vec::with_capacity(n));
    for (i, rec) in records.iter().enumerate() {
        let row = i + 1;
        let a = parse_number(&rec[age_col], row, &schema.age)?;
        if a <= 0.0 {
            return Err(Error::Parse {
                row,
                column: schema.age.clone(),
                message: format!("age must be positive, got {a}"),
            });
        }
        age.push(a);
        ids.push(id_col.map_or_else(|| row.to_string(), |c| rec[c].to_string()));
        if let (Some(c), Some(s)) = (sex_col, sex.as_mut()) {
            s.push(Sex::parse(&rec[c]).ok_or_else(|| Error::Parse {
                row,
                column: schema.sex.clone(),
                message: format!("{:?} is not one of F, M", &rec[c]),
            })?);
        }
        if let (Some(c), Some(d)) = (dx_col, dx.as_mut()) {
            d.push(rec[c].to_string());
        }
        for (j, &c) in feature_cols.iter().enumerate() {
            features[(i, j)] = parse_number(&rec[c], row, &header[c])?;
        }
    }

    let cohort = Cohort {
        subject_ids: ids,
        features,
        feature_names: feature_cols.iter().map(|&c| header[c].clone()).collect(),
        age,
        sex,
        diagnosis: dx,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn csv_bytes(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(csv_error)?;
    w.into_inner().map_err(|e| Error::Structure(e.to_string()))
}

pub fn cohort_to_csv(cohort: &Cohort) -> Result<Vec<u8>> {
    cohort.validate()?;
    csv_bytes(|w| {
        let mut header = vec!["id".to_string(), "age".to_string()];
        if cohort.sex.is_some() {
            header.push("sex".into());
        }
        if cohort.diagnosis.is_some() {
            header.push("dx".into());
        }
        header.extend(cohort.feature_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..cohort.len() {
            let mut rec = vec![cohort.subject_ids[i].clone(), cohort.age[i].to_string()];
            if let Some(s) = &cohort.sex {
                rec.push(s[i].as_str().into());
            }
            if let Some(d) = &cohort.diagnosis {
                rec.push(d[i].clone());
            }
            rec.extend(cohort.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &cohort_to_csv(cohort)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaRecord {
    pub mean: Vec<f64>,
    /// One inner vector per component.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub log_marginal_likelihood: f64,
    pub restarts_used: usize,
    pub trace: Option<FitTrace>,
    pub config: ModelConfig,
}

/// On-disk form of a trained normative model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    /// Input feature names the model expects, in order.
    pub feature_names: Vec<String>,
    pub standardizer: Option<Standardizer<f64>>,
    pub pca: Option<PcaRecord>,
    /// Training features after preprocessing, one inner vector per subject.
    pub training_features: Vec<Vec<f64>>,
    pub training_ages: Vec<f64>,
    pub age_transform: TargetTransform<f64>,
    pub kernel_params: KernelParams<f64>,
    pub kernel_form: KernelForm,
    pub jitter: JitterLadder,
    pub fit_metadata: FitMetadata,
}

impl ModelArtifact {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.format_version,
                supported: MODEL_FORMAT_VERSION,
            });
        }
        self.kernel_params.validate()?;
        let dim = self.kernel_params.dim();
        if self.training_features.len() != self.training_ages.len() {
            return Err(Error::Integrity("training feature and age counts differ".into()));
        }
        if self.training_features.iter().any(|r| r.len() != dim) {
            return Err(Error::Integrity(format!(
                "training features do not match {dim} kernel length scales"
            )));
        }
        let input_dim = self.feature_names.len();
        if let Some(s) = &self.standardizer {
            if s.means.len() != input_dim || s.std_devs.len() != input_dim {
                return Err(Error::Integrity("standardizer width differs from feature names".into()));
            }
        }
        match &self.pca {
            Some(p) => {
                if p.mean.len() != input_dim || p.components.iter().any(|c| c.len() != input_dim) {
                    return Err(Error::Integrity("PCA width differs from feature names".into()));
                }
                if p.components.len() != dim || p.explained_variance.len() != dim {
                    return Err(Error::Integrity("PCA component count differs from kernel dimension".into()));
                }
            }
            None if input_dim != dim => {
                return Err(Error::Integrity("feature count differs from kernel dimension".into()));
            }
            None => {}
        }
        Ok(())
    }
}

pub fn model_to_string(model: &ModelArtifact) -> Result<String> {
    let body = serde_json::to_string_pretty(model).map_err(|e| Error::Structure(e.to_string()))?;
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    Ok(format!("{MODEL_MAGIC} v{}\n{body}\nsha256 {digest}\n", model.format_version))
}

pub fn model_from_str(text: &str) -> Result<ModelArtifact> {
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| Error::Integrity("model file has no header line".into()))?;
    let version = first
        .strip_prefix(MODEL_MAGIC)
        .and_then(|v| v.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Integrity(format!("bad model header {first:?}")))?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let rest = rest.strip_suffix('\n').unwrap_or(rest);
    let (body, footer) = rest
        .rsplit_once('\n')
        .ok_or_else(|| Error::Integrity("model file is truncated (no checksum line)".into()))?;
    let expected = footer
        .strip_prefix("sha256 ")
        .ok_or_else(|| Error::Integrity("model file is truncated (no checksum line)".into()))?;
    let actual = hex::encode(Sha256::digest(body.as_bytes()));
    if actual != expected.trim() {
        return Err(Error::Integrity("model checksum mismatch".into()));
    }
    let artifact: ModelArtifact =
        serde_json::from_str(body).map_err(|e| Error::Integrity(format!("model body: {e}")))?;
    artifact.validate()?;
    Ok(artifact)
}

pub fn save_model(model: &ModelArtifact, path: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    write_atomic(path, model_to_string(model)?.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelArtifact> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}

/// Per-subject abnormality scores in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub ids: Vec<String>,
    pub age: Vec<f64>,
    /// Empty string when the cohort has no diagnosis column.
    pub diagnosis: Vec<String>,
    pub y_hat: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub cov: Vec<f64>,
    pub cov_w: Vec<f64>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        let lens = [
            self.age.len(),
            self.diagnosis.len(),
            self.y_hat.len(),
            self.epsilon.len(),
            self.cov.len(),
            self.cov_w.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::contract(format!("score columns have unequal lengths: {n} ids vs {lens:?}")));
        }
        Ok(())
    }

    /// Column by metric name (`epsilon`, `cov`, `cov_w`, `y_hat`, `age`).
    pub fn metric(&self, name: &str) -> Option<&[f64]> {
        match name {
            "epsilon" => Some(&self.epsilon),
            "cov" => Some(&self.cov),
            "cov_w" => Some(&self.cov_w),
            "y_hat" => Some(&self.y_hat),
            "age" => Some(&self.age),
            _ => None,
        }
    }
}

pub fn scores_to_csv(table: &ScoreTable) -> Result<Vec<u8>> {
    table.validate()?;
    csv_bytes(|w| {
        w.write_record(SCORE_HEADER)?;
        for i in 0..table.len() {
            w.write_record([
                table.ids[i].clone(),
                table.age[i].to_string(),
                table.diagnosis[i].clone(),
                table.y_hat[i].to_string(),
                table.epsilon[i].to_string(),
                table.cov[i].to_string(),
                table.cov_w[i].to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn save_scores(table: &ScoreTable, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &scores_to_csv(table)?)
}

pub fn read_scores<R: Read>(reader: R) -> Result<ScoreTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header != SCORE_HEADER {
        return Err(Error::Structure(format!(
            "score header must be {}, got {}",
            SCORE_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut t = ScoreTable::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let row = i + 1;
        let num = |c: usize| -> Result<f64> {
            rec[c].parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: SCORE_HEADER[c].to_string(),
                message: format!("{:?} is not a number", &rec[c]),
            })
        };
        t.ids.push(rec[0].to_string());
        t.age.push(num(1)?);
        t.diagnosis.push(rec[2].to_string());
        t.y_hat.push(num(3)?);
        t.epsilon.push(num(4)?);
        t.cov.push(num(5)?);
        t.cov_w.push(num(6)?);
    }
    Ok(t)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores(file)
}
