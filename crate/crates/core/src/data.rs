// SPDX-License-Identifier: Apache-2.0

//! Local datasets: sample ids, a dense feature matrix and optional labels.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// Opaque sample identifier (the UTF-8 bytes of the id string).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(Vec<u8>);

impl EntityId {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Self(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        Self(s.as_bytes().to_vec())
    }
}

impl From<String> for EntityId {
    fn from(s: String) -> Self {
        Self(s.into_bytes())
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&self.0))
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EntityId({self})")
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data has wrong length");
        Self { rows, cols, data }
    }

    /// Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |i| self.get(i, j))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(cols.iter().map(|&j| row[j]));
        }
        Self {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    /// `[self | other]`.
    pub fn hconcat(&self, other: &Matrix) -> Self {
        assert_eq!(self.rows, other.rows, "row count mismatch");
        let mut data = Vec::with_capacity(self.rows * (self.cols + other.cols));
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Self {
            rows: self.rows,
            cols: self.cols + other.cols,
            data,
        }
    }

    /// `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn tmul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x * vi;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One party's local data: ids `I`, features `X`, optional labels `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPartition {
    ids: Vec<EntityId>,
    features: Matrix,
    labels: Option<Vec<f64>>,
    feature_names: Vec<String>,
}

impl DatasetPartition {
    pub fn new(
        ids: Vec<EntityId>,
        features: Matrix,
        labels: Option<Vec<f64>>,
        feature_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if features.rows() != ids.len() {
            return Err(DataError::Invalid(format!(
                "{} ids but {} feature rows",
                ids.len(),
                features.rows()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(DataError::Invalid(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.cols()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != ids.len() {
                return Err(DataError::Invalid(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    ids.len()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.as_bytes().is_empty() {
                return Err(DataError::Invalid("empty sample id".into()));
            }
            if !seen.insert(id) {
                return Err(DataError::Invalid(format!("duplicate sample id {id}")));
            }
        }
        let mut names = HashSet::new();
        for name in &feature_names {
            if !names.insert(name) {
                return Err(DataError::Invalid(format!("duplicate feature name {name}")));
            }
        }
        if features.as_slice().iter().chain(labels.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite value".into()));
        }
        Ok(Self {
            ids,
            features,
            labels,
            feature_names,
        })
    }

    pub fn empty(feature_names: Vec<String>, with_labels: bool) -> Self {
        let cols = feature_names.len();
        Self {
            ids: Vec::new(),
            features: Matrix::zeros(0, cols),
            labels: with_labels.then(Vec::new),
            feature_names,
        }
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.ids
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn position(&self, id: &EntityId) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            features: self.features.select_rows(rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&i| l[i]).collect()),
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Writes `id,<feature names...>[,label]` with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let csv_err = |e: csv::Error| DataError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].to_string()];
            rec.extend(self.features.row(i).iter().map(|v| format!("{v:?}")));
            if let Some(l) = &self.labels {
                rec.push(format!("{:?}", l[i]));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| DataError::Csv(e.to_string()))
    }

    /// Reads the layout produced by [`write_csv`](Self::write_csv). A final
    /// column named `label` is taken as the label vector.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, DataError> {
        let csv_err = |e: csv::Error| DataError::Csv(e.to_string());
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        if header.first().map(String::as_str) != Some("id") {
            return Err(DataError::Csv("first column must be \"id\"".into()));
        }
        let has_labels = header.last().map(String::as_str) == Some("label") && header.len() > 1;
        let n_features = header.len() - 1 - usize::from(has_labels);
        let feature_names = header[1..1 + n_features].to_vec();

        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| {
                    DataError::Csv(format!("row {}: cannot parse {s:?}: {e}", line + 1))
                })
            };
            ids.push(EntityId::from(&rec[0]));
            for j in 0..n_features {
                data.push(parse(&rec[1 + j])?);
            }
            if has_labels {
                labels.push(parse(&rec[1 + n_features])?);
            }
        }
        let rows = ids.len();
        Self::new(
            ids,
            Matrix::from_vec(rows, n_features, data),
            has_labels.then_some(labels),
            feature_names,
        )
    }
}
