//! Score-space representation of a dataset.
//!
//! Every detector maps a row to a scalar anomaly score (higher is more
//! anomalous). Columns are made comparable by `log(s - min(S) + 0.01)`
//! followed by standardisation to zero mean and unit variance.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::DetectorSpec;
use crate::error::{Error, Result};
use crate::num::{mean, std_dev, Real};

/// Offset added before taking the log so the column minimum maps to `ln(0.01)`.
pub const LOG_OFFSET: f64 = 0.01;

/// Columns whose pre-standardisation deviation falls below this are zeroed.
pub const ZERO_VARIANCE_EPS: f64 = 1e-12;

/// Unlabeled (or optionally labeled) feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDataset<T = f64> {
    pub name: String,
    rows: Vec<Vec<T>>,
    labels: Option<Vec<u8>>,
}

impl<T: Real> RawDataset<T> {
    pub fn new(name: impl Into<String>, rows: Vec<Vec<T>>, labels: Option<Vec<u8>>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::TooFewRows { needed: 2, got: rows.len() });
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::InvalidInput("rows must have at least one feature".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} features, expected {dim}",
                    r.len()
                )));
            }
            if let Some(j) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { column: j, row: i });
            }
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(Error::InvalidInput(format!(
                    "{} labels for {} rows",
                    l.len(),
                    rows.len()
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::InvalidInput("labels must be 0 or 1".into()));
            }
        }
        Ok(Self { name: name.into(), rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Proportion of rows labeled anomalous, if labels are present.
    pub fn contamination(&self) -> Option<f64> {
        self.labels
            .as_ref()
            .map(|l| l.iter().filter(|&&v| v == 1).count() as f64 / l.len() as f64)
    }

    /// Reads a CSV of feature rows. A header is detected when the first record
    /// is not fully numeric; a final header column named `label` is read as
    /// the 0/1 ground truth.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let records = read_records(path)?;
        let Some(first) = records.first() else {
            return Err(Error::TooFewRows { needed: 2, got: 0 });
        };
        let has_header = first.1.iter().any(|c| c.trim().parse::<f64>().is_err());
        let label_col = if has_header {
            let last = first.1.last().map(|s| s.trim().to_ascii_lowercase());
            (last.as_deref() == Some("label")).then(|| first.1.len() - 1)
        } else {
            None
        };
        let body = if has_header { &records[1..] } else { &records[..] };
        let width = first.1.len();
        let mut rows = Vec::with_capacity(body.len());
        let mut labels = label_col.map(|_| Vec::with_capacity(body.len()));
        for (line, rec) in body {
            if rec.len() != width {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("expected {width} fields, found {}", rec.len()),
                });
            }
            let mut row = Vec::with_capacity(width);
            for (j, cell) in rec.iter().enumerate() {
                if Some(j) == label_col {
                    let v: u8 = cell.trim().parse().map_err(|_| Error::Parse {
                        line: *line,
                        msg: format!("label `{cell}` is not 0 or 1"),
                    })?;
                    labels.as_mut().expect("label column").push(v);
                } else {
                    row.push(parse_cell::<T>(cell, *line)?);
                }
            }
            rows.push(row);
        }
        Self::new(name, rows, labels)
    }
}

/// N x M matrix of anomaly scores, stored column-major (one column per detector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix<T = f64> {
    columns: Vec<Vec<T>>,
    detector_names: Vec<String>,
    transformed: bool,
}

impl<T: Real> ScoreMatrix<T> {
    pub fn from_columns(columns: Vec<Vec<T>>, detector_names: Vec<String>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidInput("score matrix needs at least one column".into()));
        }
        if detector_names.len() != columns.len() {
            return Err(Error::InvalidInput(format!(
                "{} names for {} columns",
                detector_names.len(),
                columns.len()
            )));
        }
        let n = columns[0].len();
        if n < 2 {
            return Err(Error::TooFewRows { needed: 2, got: n });
        }
        for (j, c) in columns.iter().enumerate() {
            if c.len() != n {
                return Err(Error::InvalidInput(format!(
                    "column {j} has {} rows, expected {n}",
                    c.len()
                )));
            }
            if let Some(i) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { column: j, row: i });
            }
        }
        Ok(Self { columns, detector_names, transformed: false })
    }

    pub fn n_rows(&self) -> usize {
        self.columns[0].len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[T] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<T>] {
        &self.columns
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn detector_names(&self) -> &[String] {
        &self.detector_names
    }

    pub fn is_transformed(&self) -> bool {
        self.transformed
    }

    /// Applies [`transform_scores`] to every column.
    pub fn transformed(self) -> Result<Self> {
        if self.transformed {
            return Ok(self);
        }
        let columns = self
            .columns
            .par_iter()
            .enumerate()
            .map(|(j, c)| transform_scores(c).map_err(|e| with_column(e, j)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { columns, detector_names: self.detector_names, transformed: true })
    }

    /// Column selection, keeping the original transform flag.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::InvalidInput("empty column selection".into()));
        }
        let mut columns = Vec::with_capacity(idx.len());
        let mut names = Vec::with_capacity(idx.len());
        for &j in idx {
            if j >= self.n_cols() {
                return Err(Error::InvalidInput(format!("column {j} out of range")));
            }
            columns.push(self.columns[j].clone());
            names.push(self.detector_names[j].clone());
        }
        Ok(Self { columns, detector_names: names, transformed: self.transformed })
    }
}

impl ScoreMatrix<f64> {
    /// Row-major N x M copy used by the mixture fit.
    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n_rows(), self.n_cols(), |i, j| self.columns[j][i])
    }
}

fn with_column(e: Error, j: usize) -> Error {
    match e {
        Error::NonFinite { row, .. } => Error::NonFinite { column: j, row },
        other => other,
    }
}

/// Maps a raw score column to `log(s - min + 0.01)` and standardises it with
/// the population variance. A column that is constant after the log step is
/// returned as all zeros.
pub fn transform_scores<T: Real>(raw: &[T]) -> Result<Vec<T>> {
    if raw.len() < 2 {
        return Err(Error::TooFewRows { needed: 2, got: raw.len() });
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { column: 0, row: i });
    }
    let min = raw.iter().copied().fold(T::infinity(), T::min);
    let offset = T::lit(LOG_OFFSET);
    let logged: Vec<T> = raw.iter().map(|&s| (s - min + offset).ln()).collect();
    let mu = mean(&logged);
    let sd = std_dev(&logged, 0);
    if sd < T::lit(ZERO_VARIANCE_EPS) {
        log::warn!("constant score column; emitting zeros");
        return Ok(vec![T::zero(); raw.len()]);
    }
    Ok(logged.into_iter().map(|v| (v - mu) / sd).collect())
}

/// Runs every detector on the dataset and returns the transformed score matrix,
/// columns in detector order.
pub fn build_score_matrix<T: Real>(
    dataset: &RawDataset<T>,
    detectors: &[DetectorSpec],
) -> Result<ScoreMatrix<T>> {
    if detectors.is_empty() {
        return Err(Error::InvalidInput("at least one detector is required".into()));
    }
    let columns = detectors
        .par_iter()
        .map(|d| d.score(dataset))
        .collect::<Result<Vec<_>>>()?;
    let names = detectors.iter().map(|d| d.name()).collect();
    ScoreMatrix::from_columns(columns, names)?.transformed()
}

/// Reads an N x M score CSV. The result is untransformed.
pub fn ingest_scores<T: Real>(path: impl AsRef<Path>, has_header: bool) -> Result<ScoreMatrix<T>> {
    let records = read_records(path.as_ref())?;
    let (names, body) = match (has_header, records.split_first()) {
        (true, Some((head, rest))) => (Some(head.1.clone()), rest),
        _ => (None, &records[..]),
    };
    let Some(first) = body.first() else {
        return Err(Error::TooFewRows { needed: 2, got: 0 });
    };
    let width = names.as_ref().map_or(first.1.len(), Vec::len);
    let mut columns = vec![Vec::with_capacity(body.len()); width];
    for (line, rec) in body {
        if rec.len() != width {
            return Err(Error::Parse {
                line: *line,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            columns[j].push(parse_cell::<T>(cell, *line)?);
        }
    }
    if body.len() < 2 {
        return Err(Error::TooFewRows { needed: 2, got: body.len() });
    }
    let names = names
        .map(|n| n.into_iter().map(|s| s.trim().to_string()).collect())
        .unwrap_or_else(|| (0..width).map(|j| format!("score{j}")).collect());
    ScoreMatrix::from_columns(columns, names)
}

fn parse_cell<T: Real>(cell: &str, line: usize) -> Result<T> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("`{cell}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("`{cell}` is not finite") });
    }
    Ok(T::lit(v))
}

/// Reads all CSV records as strings, tagged with 1-based line numbers.
pub(crate) fn read_records(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}
