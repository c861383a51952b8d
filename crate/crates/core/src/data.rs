//! Dataset ingestion, standardization and train/test splitting.
//!
//! CSV files are comma separated with a header row and '.' decimals. Every
//! cell must parse as a finite number; missing values are rejected.

use std::fs::File;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Feature matrix plus continuous response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Array2<f64>,
    response: Vec<f64>,
    feature_names: Vec<String>,
    response_name: String,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        response: Vec<f64>,
        feature_names: Vec<String>,
        response_name: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if response.len() != n {
            return Err(Error::InvalidParameter(format!(
                "response has {} values for {} rows",
                response.len(),
                n
            )));
        }
        if feature_names.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: feature_names.len(),
            });
        }
        if n < 2 {
            return Err(Error::TooSmall(format!("dataset needs at least 2 rows, got {n}")));
        }
        if d < 1 {
            return Err(Error::TooSmall("dataset needs at least one feature".into()));
        }
        if let Some(((r, c), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::BadCell {
                row: r + 1,
                column: feature_names[c].clone(),
                value: features[[r, c]].to_string(),
            });
        }
        if let Some(r) = response.iter().position(|v| !v.is_finite()) {
            return Err(Error::BadCell {
                row: r + 1,
                column: response_name.into(),
                value: response[r].to_string(),
            });
        }
        // Row access hands out contiguous slices.
        let features = if features.is_standard_layout() {
            features
        } else {
            features.as_standard_layout().into_owned()
        };
        Ok(Self {
            features,
            response,
            feature_names,
            response_name: response_name.into(),
        })
    }

    /// Builds a dataset with generated names `x1..xd` and response `y`.
    pub fn from_rows(features: Array2<f64>, response: Vec<f64>) -> Result<Self> {
        let names = (1..=features.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(features, response, names, "y")
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn row(&self, i: usize) -> &[f64] {
        row_slice(&self.features, i)
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            response: idx.iter().map(|&i| self.response[i]).collect(),
            feature_names: self.feature_names.clone(),
            response_name: self.response_name.clone(),
        }
    }
}

/// Contiguous view of row `i` of a standard-layout matrix.
pub fn row_slice(m: &Array2<f64>, i: usize) -> &[f64] {
    let d = m.ncols();
    let all = m.as_slice().expect("matrix in standard layout");
    &all[i * d..(i + 1) * d]
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::BadCell {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        }),
    }
}

/// Reads a CSV with a header row, splitting off `response_column`.
///
/// Row numbers in errors count data rows from 1 (the header is not counted).
pub fn load_csv(path: impl AsRef<Path>, response_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = open(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let resp_col = header
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| Error::MissingColumn(response_column.to_string()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != resp_col)
        .map(|(_, h)| h.clone())
        .collect();

    let d = feature_names.len();
    let mut values = Vec::new();
    let mut response = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for (j, raw) in record.iter().enumerate() {
            let v = parse_cell(raw, r + 1, &header[j])?;
            if j == resp_col {
                response.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = response.len();
    let features =
        Array2::from_shape_vec((n, d), values).map_err(|e| Error::InvalidParameter(format!("ragged csv: {e}")))?;
    Dataset::new(features, response, feature_names, response_column)
}

/// Reads the named feature columns of a CSV (any other columns are ignored).
/// Unlike [`load_csv`] this accepts a header-only file and returns zero rows.
pub fn load_feature_csv(path: impl AsRef<Path>, feature_names: &[String]) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let mut reader = open(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let cols = feature_names
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::new();
    let mut n = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for &c in &cols {
            let raw = record.get(c).unwrap_or("");
            values.push(parse_cell(raw, r + 1, &header[c])?);
        }
        n += 1;
    }
    Array2::from_shape_vec((n, cols.len()), values).map_err(|e| Error::InvalidParameter(format!("ragged csv: {e}")))
}

/// Writes features then response. Floats use the shortest representation
/// that parses back to the same value, so `load_csv` recovers the matrix exactly.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<&str> = ds.feature_names.iter().map(String::as_str).collect();
    header.push(&ds.response_name);
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.row(i).iter().map(f64::to_string).collect();
        rec.push(ds.response[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-feature centering and scaling fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl Standardizer {
    /// Column means and sample standard deviations (divisor n−1). A constant
    /// column gets sd 1, so it standardizes to all zeros.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut sds = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mean = col.sum() / n;
            let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let sd = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
            let degenerate = sd.is_nan() || sd <= f64::EPSILON * mean.abs().max(1.0);
            means.push(mean);
            sds.push(if degenerate { 1.0 } else { sd });
        }
        Self { means, sds }
    }

    pub fn fit_dataset(ds: &Dataset) -> Self {
        Self::fit(ds.features())
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sds(&self) -> &[f64] {
        &self.sds
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok(x.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn inverse_row(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok(z.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mut out = x.as_standard_layout().into_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.means[j]) / self.sds[j];
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(z.ncols())?;
        let mut out = z.as_standard_layout().into_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.sds[j] + self.means[j];
            }
        }
        Ok(out)
    }

    fn check(&self, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Shuffled index partition: `round(train_fraction·n)` training rows, the rest test.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train_fraction must lie in (0,1), got {}",
            spec.train_fraction
        )));
    }
    if n < 5 {
        return Err(Error::TooSmall(format!("cannot split {n} rows")));
    }
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::TooSmall(format!(
            "fraction {} of {n} rows leaves an empty part",
            spec.train_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.n(), spec)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Sample standard deviation of a column view (divisor n−1).
pub fn column_sd(col: ArrayView1<f64>) -> f64 {
    let n = col.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = col.sum() / n;
    (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
