//! Datasets, standardization, delimited-file I/O and the sinc generator.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Per-column affine maps between raw units and model units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

impl Standardization {
    /// Mean and population standard deviation of each column; zero-spread
    /// columns keep scale 1.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let (x_mean, x_scale) = x
            .column_iter()
            .map(|c| mean_and_scale(c.iter().copied()))
            .unzip();
        let (y_mean, y_scale) = mean_and_scale(y.iter().copied());
        Standardization {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Standardization {
            x_mean: vec![0.0; dim],
            x_scale: vec![1.0; dim],
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.ncols(),
                context: "feature columns vs standardization",
            });
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.x_mean[j]) / self.x_scale[j]
        }))
    }

    pub fn inverse_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            x[(i, j)] * self.x_scale[j] + self.x_mean[j]
        })
    }

    pub fn transform_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_scale
    }

    pub fn inverse_y(&self, y: f64) -> f64 {
        y * self.y_scale + self.y_mean
    }

    pub fn inverse_variance(&self, v: f64) -> f64 {
        v * self.y_scale * self.y_scale
    }
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

/// Feature matrix plus response, in model units when `standardization` is
/// set (raw values are recoverable through it).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(x, y, names, "y".to_owned())
    }

    pub fn with_names(
        x: DMatrix<f64>,
        y: DVector<f64>,
        feature_names: Vec<String>,
        target_name: String,
    ) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension {
                expected: x.nrows(),
                got: y.len(),
                context: "response length vs feature rows",
            });
        }
        if x.nrows() == 0 {
            return Err(Error::input("dataset has no rows"));
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::Dimension {
                expected: x.ncols(),
                got: feature_names.len(),
                context: "feature names vs columns",
            });
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::input("dataset contains non-finite values"));
        }
        Ok(Dataset {
            x,
            y,
            feature_names,
            target_name,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Standardizes with statistics of this data. A dataset that is already
    /// standardized is returned unchanged.
    pub fn standardized(&self) -> Dataset {
        if self.standardization.is_some() {
            return self.clone();
        }
        let s = Standardization::fit(&self.x, &self.y);
        self.apply(s).expect("statistics match own columns")
    }

    /// Re-expresses raw data in the units of an existing standardization
    /// (e.g. a test split standardized with training statistics).
    pub fn standardized_with(&self, s: &Standardization) -> Result<Dataset> {
        let raw = self.to_raw();
        raw.apply(s.clone())
    }

    fn apply(&self, s: Standardization) -> Result<Dataset> {
        let x = s.transform_x(&self.x)?;
        let y = self.y.map(|v| s.transform_y(v));
        Ok(Dataset {
            x,
            y,
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            standardization: Some(s),
        })
    }

    pub fn to_raw(&self) -> Dataset {
        match &self.standardization {
            None => self.clone(),
            Some(s) => Dataset {
                x: s.inverse_x(&self.x),
                y: self.y.map(|v| s.inverse_y(v)),
                feature_names: self.feature_names.clone(),
                target_name: self.target_name.clone(),
                standardization: None,
            },
        }
    }

    pub fn raw_x(&self) -> DMatrix<f64> {
        match &self.standardization {
            Some(s) => s.inverse_x(&self.x),
            None => self.x.clone(),
        }
    }

    pub fn raw_y(&self) -> DVector<f64> {
        match &self.standardization {
            Some(s) => self.y.map(|v| s.inverse_y(v)),
            None => self.y.clone(),
        }
    }

    /// Rows at `indices` (repeats allowed), keeping names and standardization.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let x = self.x.select_rows(indices);
        let y = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.y[i]));
        Dataset {
            x,
            y,
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Seeded uniform shuffle, first `train_fraction` of rows to train.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::input(format!(
                "split fraction {train_fraction} outside (0, 1)"
            )));
        }
        let n = self.len();
        let n_train = ((n as f64) * train_fraction).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::input(format!(
                "split of {n} rows at {train_fraction} leaves an empty side"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, 0));
        Ok((
            self.select(&order[..n_train]),
            self.select(&order[n_train..]),
        ))
    }
}

/// How to read a delimited text file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelimitedSchema {
    pub delimiter: char,
    pub target: String,
    /// Feature columns by header name; empty means every non-target column.
    pub features: Vec<String>,
    pub standardize: bool,
}

impl Default for DelimitedSchema {
    fn default() -> Self {
        DelimitedSchema {
            delimiter: ',',
            target: "y".to_owned(),
            features: Vec::new(),
            standardize: true,
        }
    }
}

/// A loaded dataset plus the number of rows dropped for unparseable or
/// non-finite cells.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub dropped_rows: usize,
}

struct Columns {
    names: Vec<String>,
    values: Vec<f64>,
    ys: Vec<f64>,
    rows: usize,
    dropped: usize,
}

fn read_columns(
    path: &Path,
    delimiter: char,
    target: Option<&str>,
    features: &[String],
) -> Result<Columns> {
    let data_err = |message: String| Error::Data {
        path: path.to_owned(),
        message,
    };
    if !delimiter.is_ascii() {
        return Err(data_err(
            "delimiter must be a single ASCII character".into(),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| data_err(format!("column '{name}' not found in header")))
    };
    let target = target.map(column).transpose()?;
    let features: Vec<usize> = if features.is_empty() {
        (0..headers.len()).filter(|&c| Some(c) != target).collect()
    } else {
        features.iter().map(|f| column(f)).collect::<Result<_>>()?
    };

    let mut values = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0;
    let mut dropped = 0;
    for record in reader.records() {
        let record = record?;
        let parse = |c: usize| {
            record
                .get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        let y = match target {
            Some(t) => parse(t).map(Some),
            None => Some(None),
        };
        let row: Option<Vec<f64>> = features.iter().map(|&c| parse(c)).collect();
        match (y, row) {
            (Some(y), Some(row)) => {
                ys.extend(y);
                values.extend(row);
                rows += 1;
            }
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} row(s) with missing or non-numeric values",
            path.display()
        );
    }
    if rows == 0 {
        return Err(data_err("no usable data rows".into()));
    }
    Ok(Columns {
        names: features.iter().map(|&c| headers[c].clone()).collect(),
        values,
        ys,
        rows,
        dropped,
    })
}

pub fn load_delimited(path: &Path, schema: &DelimitedSchema) -> Result<Loaded> {
    let cols = read_columns(
        path,
        schema.delimiter,
        Some(&schema.target),
        &schema.features,
    )?;
    let x = DMatrix::from_row_slice(cols.rows, cols.names.len(), &cols.values);
    let dataset = Dataset::with_names(
        x,
        DVector::from_vec(cols.ys),
        cols.names,
        schema.target.clone(),
    )?;
    let dataset = if schema.standardize {
        dataset.standardized()
    } else {
        dataset
    };
    Ok(Loaded {
        dataset,
        dropped_rows: cols.dropped,
    })
}

/// Reads only the named feature columns (in that order); no response
/// column is required. Returns the matrix and the dropped-row count.
pub fn load_features(
    path: &Path,
    delimiter: char,
    features: &[String],
) -> Result<(DMatrix<f64>, usize)> {
    if features.is_empty() {
        return Err(Error::input("no feature columns requested"));
    }
    let cols = read_columns(path, delimiter, None, features)?;
    Ok((
        DMatrix::from_row_slice(cols.rows, cols.names.len(), &cols.values),
        cols.dropped,
    ))
}

/// Writes raw-unit values with a header row: features then target.
pub fn write_delimited(path: &Path, data: &Dataset, delimiter: char) -> Result<()> {
    let raw = data.to_raw();
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter as u8)
        .from_path(path)?;
    let mut header = raw.feature_names.clone();
    header.push(raw.target_name.clone());
    w.write_record(&header)?;
    for i in 0..raw.len() {
        let mut row: Vec<String> = raw.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(format!("{:?}", raw.y[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// `n` points uniform on `range` with `y = sin(x)/x` plus optional Gaussian
/// noise. Raw units (not standardized).
pub fn generate_sinc(n: usize, range: (f64, f64), noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::input("sinc generator needs n >= 1"));
    }
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::input(format!("bad sinc range [{lo}, {hi}]")));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::input("noise sd must be finite and >= 0"));
    }
    let mut r = rng::stream(seed, 0);
    let xs: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let noise = if noise_sd > 0.0 {
                noise_sd * r.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            sinc(x) + noise
        })
        .collect();
    Dataset::with_names(
        DMatrix::from_column_slice(n, 1, &xs),
        DVector::from_vec(ys),
        vec!["x".to_owned()],
        "y".to_owned(),
    )
}
