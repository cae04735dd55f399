//! CSV interchange formats.
//!
//! Dataset files carry one subject per row:
//! `subject_id, snp, age, sex, weight, hgb, alb, race, extra_1, extra_2, c_0000 … c_NNNN`.
//! Latent files carry `subject_id, mu_1 … mu_d, logvar_1 … logvar_d`.
//! Floats are written in Rust's shortest round-trip form.

use std::io::{Read, Write};

use thiserror::Error;

use crate::lasso::SelectionReport;
use crate::nn::Matrix;
use crate::pksim::{CovariateRecord, PkError, Subject};
use crate::vae::EpochRecord;

pub const COVARIATE_COLUMNS: [&str; 9] = [
    "snp", "age", "sex", "weight", "hgb", "alb", "race", "extra_1", "extra_2",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch at column {position}: expected '{expected}', found '{found}'")]
    Header {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("row {row}, column '{column}': {message}")]
    Field {
        row: usize,
        column: String,
        message: String,
    },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RowLength { row: usize, expected: usize, found: usize },
    #[error("duplicate subject_id {0}")]
    DuplicateSubject(u64),
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    fn field(row: usize, column: &str, message: impl ToString) -> Self {
        DataError::Field {
            row,
            column: column.to_string(),
            message: message.to_string(),
        }
    }
}

/// One subject as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub subject_id: u64,
    pub record: CovariateRecord,
    pub concentrations: Vec<f64>,
}

impl From<&Subject> for DatasetRow {
    fn from(s: &Subject) -> Self {
        Self {
            subject_id: s.curve.subject_id,
            record: s.record,
            concentrations: s.curve.concentrations.clone(),
        }
    }
}

pub fn concentration_column(i: usize) -> String {
    format!("c_{i:04}")
}

pub fn dataset_header(grid_points: usize) -> Vec<String> {
    let mut h = vec!["subject_id".to_string()];
    h.extend(COVARIATE_COLUMNS.iter().map(|s| s.to_string()));
    h.extend((0..grid_points).map(concentration_column));
    h
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_dataset<W: Write>(writer: W, rows: &[DatasetRow]) -> Result<(), DataError> {
    let grid = rows.first().map_or(0, |r| r.concentrations.len());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(dataset_header(grid))?;
    for r in rows {
        if r.concentrations.len() != grid {
            return Err(DataError::Invalid(format!(
                "subject {} has {} grid points, expected {grid}",
                r.subject_id,
                r.concentrations.len()
            )));
        }
        let rec = &r.record;
        let mut fields = vec![
            r.subject_id.to_string(),
            rec.snp.to_string(),
            fmt_f64(rec.age),
            rec.sex.to_string(),
            fmt_f64(rec.weight),
            fmt_f64(rec.hgb),
            fmt_f64(rec.alb),
            rec.race.to_string(),
            fmt_f64(rec.extra_1),
            fmt_f64(rec.extra_2),
        ];
        fields.extend(r.concentrations.iter().map(|&c| fmt_f64(c)));
        w.write_record(&fields)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn parse_f64(row: usize, column: &str, s: &str) -> Result<f64, DataError> {
    let v: f64 = s.trim().parse().map_err(|e| DataError::field(row, column, e))?;
    if !v.is_finite() {
        return Err(DataError::field(row, column, "non-finite value"));
    }
    Ok(v)
}

fn check_header(found: &csv::StringRecord, expected_prefix: &[String]) -> Result<(), DataError> {
    for (i, exp) in expected_prefix.iter().enumerate() {
        let got = found.get(i).unwrap_or("<missing>");
        if got != exp {
            return Err(DataError::Header {
                position: i,
                expected: exp.clone(),
                found: got.to_string(),
            });
        }
    }
    Ok(())
}

/// Parses a dataset file. Header names are checked exactly; the number of
/// `c_` columns sets the grid length.
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<DatasetRow>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() <= 1 + COVARIATE_COLUMNS.len() {
        return Err(DataError::Invalid(format!(
            "dataset header has {} columns; expected subject_id, 9 covariates and at least one concentration column",
            header.len()
        )));
    }
    let grid = header.len() - 1 - COVARIATE_COLUMNS.len();
    check_header(&header, &dataset_header(grid))?;

    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, result) in rdr.records().enumerate() {
        let rec = result?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(DataError::RowLength {
                row: line,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let subject_id: u64 = rec[0].trim().parse().map_err(|e| DataError::field(line, "subject_id", e))?;
        if !seen.insert(subject_id) {
            return Err(DataError::DuplicateSubject(subject_id));
        }
        let snp: u8 = rec[1].trim().parse().map_err(|e| DataError::field(line, "snp", e))?;
        let sex = rec[3]
            .trim()
            .parse()
            .map_err(|e: PkError| DataError::field(line, "sex", e))?;
        let race = rec[7]
            .trim()
            .parse()
            .map_err(|e: PkError| DataError::field(line, "race", e))?;
        let record = CovariateRecord {
            snp,
            age: parse_f64(line, "age", &rec[2])?,
            sex,
            weight: parse_f64(line, "weight", &rec[4])?,
            hgb: parse_f64(line, "hgb", &rec[5])?,
            alb: parse_f64(line, "alb", &rec[6])?,
            race,
            extra_1: parse_f64(line, "extra_1", &rec[8])?,
            extra_2: parse_f64(line, "extra_2", &rec[9])?,
        };
        if !record.is_valid() {
            return Err(DataError::field(line, "covariates", "record violates covariate ranges"));
        }
        let offset = 1 + COVARIATE_COLUMNS.len();
        let concentrations = (0..grid)
            .map(|j| {
                let v = parse_f64(line, &header[offset + j], &rec[offset + j])?;
                if v < 0.0 {
                    return Err(DataError::field(line, &header[offset + j], "negative concentration"));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(DatasetRow {
            subject_id,
            record,
            concentrations,
        });
    }
    if rows.is_empty() {
        return Err(DataError::Invalid("dataset has no rows".into()));
    }
    Ok(rows)
}

/// Stacks concentration vectors row-wise.
pub fn concentration_matrix(rows: &[DatasetRow]) -> Matrix {
    let grid = rows.first().map_or(0, |r| r.concentrations.len());
    let mut m = Matrix::zeros(rows.len(), grid);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&r.concentrations);
    }
    m
}

/// Posterior parameters for a set of subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    pub subject_ids: Vec<u64>,
    pub mu: Matrix,
    pub logvar: Matrix,
}

impl LatentTable {
    pub fn latent_dim(&self) -> usize {
        self.mu.cols()
    }
}

pub fn latent_header(latent_dim: usize) -> Vec<String> {
    let mut h = vec!["subject_id".to_string()];
    h.extend((1..=latent_dim).map(|d| format!("mu_{d}")));
    h.extend((1..=latent_dim).map(|d| format!("logvar_{d}")));
    h
}

pub fn write_latents<W: Write>(writer: W, table: &LatentTable) -> Result<(), DataError> {
    let d = table.latent_dim();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(latent_header(d))?;
    for (i, id) in table.subject_ids.iter().enumerate() {
        let mut fields = vec![id.to_string()];
        fields.extend(table.mu.row(i).iter().map(|&v| fmt_f64(v)));
        fields.extend(table.logvar.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&fields)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_latents<R: Read>(reader: R) -> Result<LatentTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || header.len() % 2 == 0 {
        return Err(DataError::Invalid(format!(
            "latent header has {} columns; expected 1 + 2·latent_dim",
            header.len()
        )));
    }
    let d = (header.len() - 1) / 2;
    check_header(&header, &latent_header(d))?;
    let mut ids = Vec::new();
    let mut mu = Vec::new();
    let mut logvar = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, result) in rdr.records().enumerate() {
        let rec = result?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(DataError::RowLength {
                row: line,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let id: u64 = rec[0].trim().parse().map_err(|e| DataError::field(line, "subject_id", e))?;
        if !seen.insert(id) {
            return Err(DataError::DuplicateSubject(id));
        }
        ids.push(id);
        for j in 0..d {
            mu.push(parse_f64(line, &header[1 + j], &rec[1 + j])?);
            logvar.push(parse_f64(line, &header[1 + d + j], &rec[1 + d + j])?);
        }
    }
    if ids.is_empty() {
        return Err(DataError::Invalid("latent file has no rows".into()));
    }
    let n = ids.len();
    Ok(LatentTable {
        subject_ids: ids,
        mu: Matrix::from_vec(n, d, mu).expect("sized above"),
        logvar: Matrix::from_vec(n, d, logvar).expect("sized above"),
    })
}

pub const HISTORY_HEADER: [&str; 4] = ["epoch", "recon", "kl", "beta"];

pub fn write_history<W: Write>(writer: W, history: &[EpochRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HISTORY_HEADER)?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            fmt_f64(h.reconstruction),
            fmt_f64(h.kl),
            fmt_f64(h.beta),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_history<R: Read>(reader: R) -> Result<Vec<EpochRecord>, DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    check_header(&header, &HISTORY_HEADER.map(String::from))?;
    let mut out = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let rec = result?;
        let line = i + 2;
        out.push(EpochRecord {
            epoch: rec[0].trim().parse().map_err(|e| DataError::field(line, "epoch", e))?,
            reconstruction: parse_f64(line, "recon", &rec[1])?,
            kl: parse_f64(line, "kl", &rec[2])?,
            beta: parse_f64(line, "beta", &rec[3])?,
        });
    }
    Ok(out)
}

pub const SELECTION_HEADER: [&str; 4] = ["covariate", "lambda", "importance", "retained"];

/// Long-form `(covariate, lambda, importance, retained)` rows for plotting.
pub fn write_selection<W: Write>(writer: W, report: &SelectionReport) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SELECTION_HEADER)?;
    for row in &report.series {
        w.write_record([
            row.covariate.clone(),
            fmt_f64(row.lambda),
            fmt_f64(row.importance),
            row.retained.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_selection<R: Read>(reader: R) -> Result<Vec<crate::lasso::SeriesRow>, DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    check_header(&header, &SELECTION_HEADER.map(String::from))?;
    let mut out = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let rec = result?;
        let line = i + 2;
        out.push(crate::lasso::SeriesRow {
            covariate: rec[0].to_string(),
            lambda: parse_f64(line, "lambda", &rec[1])?,
            importance: parse_f64(line, "importance", &rec[2])?,
            retained: rec[3].trim().parse().map_err(|e| DataError::field(line, "retained", e))?,
        });
    }
    Ok(out)
}

/// `subject_id, c_0000 …` rows of reconstructed profiles.
pub fn write_profiles<W: Write>(writer: W, subject_ids: &[u64], profiles: &Matrix) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string()];
    header.extend((0..profiles.cols()).map(concentration_column));
    w.write_record(&header)?;
    for (i, id) in subject_ids.iter().enumerate() {
        let mut fields = vec![id.to_string()];
        fields.extend(profiles.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&fields)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
