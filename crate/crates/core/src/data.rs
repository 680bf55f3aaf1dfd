//! CSV ingestion, train-split standardization and sliding windows.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard added to every scaler std before dividing.
pub const SCALER_EPS: f64 = 1e-8;

/// A multivariate series: `len` rows of `dim` columns, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    /// ISO-8601 strings, one per row; empty when the file has no date column.
    pub timestamps: Vec<String>,
    pub values: Vec<f64>,
    pub column_names: Vec<String>,
}

impl RawSeries {
    pub fn new(timestamps: Vec<String>, values: Vec<f64>, column_names: Vec<String>) -> Result<Self> {
        let d = column_names.len();
        if d == 0 || !values.len().is_multiple_of(d) {
            return Err(Error::Data(format!(
                "{} values do not form rows of {} columns",
                values.len(),
                d
            )));
        }
        if !timestamps.is_empty() && timestamps.len() != values.len() / d {
            return Err(Error::Data("timestamp count differs from row count".into()));
        }
        Ok(RawSeries {
            timestamps,
            values,
            column_names,
        })
    }

    pub fn dim(&self) -> usize {
        self.column_names.len()
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(c).step_by(self.dim()).copied()
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        let d = self.dim();
        RawSeries {
            timestamps: if self.timestamps.is_empty() {
                Vec::new()
            } else {
                self.timestamps[start..end].to_vec()
            },
            values: self.values[start * d..end * d].to_vec(),
            column_names: self.column_names.clone(),
        }
    }

    /// First `rows` rows (or all of them if shorter).
    pub fn truncate(&self, rows: usize) -> RawSeries {
        self.slice(0, rows.min(self.len()))
    }
}

/// Read a header-first CSV. With `has_date_column` the first column holds
/// timestamps, which must be strictly increasing (ISO-8601 strings of one
/// format order lexicographically); every other cell must be a finite number.
pub fn load_csv(path: impl AsRef<Path>, has_date_column: bool) -> Result<RawSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let skip = usize::from(has_date_column);
    if header.len() <= skip {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }
    let column_names = header[skip..].to_vec();
    let mut timestamps: Vec<String> = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // row numbers are 1-based and count the header line
        let row = i + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                column: record.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        if has_date_column {
            let ts = record[0].trim().to_string();
            if let Some(prev) = timestamps.last() {
                if ts.as_str() <= prev.as_str() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row,
                        column: 1,
                        message: format!("timestamp {ts} does not follow {prev}"),
                    });
                }
            }
            timestamps.push(ts);
        }
        for (j, cell) in record.iter().enumerate().skip(skip) {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                column: j + 1,
                message: format!("cannot parse {cell:?} in column {}", header[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: j + 1,
                    message: format!("non-finite value {cell:?} in column {}", header[j]),
                });
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    RawSeries::new(timestamps, values, column_names)
}

/// Like [`load_csv`], treating the first column as the timestamp when its
/// header is `date`.
pub fn load_csv_auto(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let first = reader.headers()?.get(0).map(|h| h.trim().eq_ignore_ascii_case("date"));
    load_csv(path, first.unwrap_or(false))
}

/// Train/val/test proportions used when none are configured: 0.6/0.2/0.2 for
/// the ETT hourly and minute files, 0.7/0.1/0.2 otherwise.
pub fn default_split_ratios(path: &Path) -> (f64, f64, f64) {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    if name.starts_with("etth") || name.starts_with("ettm") {
        (0.6, 0.2, 0.2)
    } else {
        (0.7, 0.1, 0.2)
    }
}

/// Per-column z-scoring statistics (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(series: &RawSeries) -> Result<Self> {
        let n = series.len() as f64;
        let mut mean = Vec::with_capacity(series.dim());
        let mut std = Vec::with_capacity(series.dim());
        for c in 0..series.dim() {
            let m = series.column(c).sum::<f64>() / n;
            let var = series.column(c).map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            if s < 1e-12 {
                return Err(Error::Data(format!(
                    "column {:?} has zero variance in the training split",
                    series.column_names[c]
                )));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, series: &RawSeries) -> RawSeries {
        let d = series.dim();
        let values = series
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % d]) / (self.std[i % d] + SCALER_EPS))
            .collect();
        RawSeries {
            values,
            ..series.clone()
        }
    }

    pub fn inverse(&self, series: &RawSeries) -> RawSeries {
        let d = series.dim();
        let values = series
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (self.std[i % d] + SCALER_EPS) + self.mean[i % d])
            .collect();
        RawSeries {
            values,
            ..series.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Chronologically split with `ratios`, fit the scaler on the train part and
/// standardize all three parts with it.
pub fn split_and_standardize(
    series: &RawSeries,
    ratios: (f64, f64, f64),
) -> Result<([RawSeries; 3], Scaler)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = series.len();
    let n_train = (n as f64 * a).floor() as usize;
    let n_val = (n as f64 * b).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Data(format!("series of {n} rows is too short to split")));
    }
    let train = series.slice(0, n_train);
    let val = series.slice(n_train, n_train + n_val);
    let test = series.slice(n_train + n_val, n);
    let scaler = Scaler::fit(&train)?;
    Ok((
        [
            scaler.transform(&train),
            scaler.transform(&val),
            scaler.transform(&test),
        ],
        scaler,
    ))
}

/// Input/target window pairs over one split. Windows reference the shared
/// series, so `target(i)` starts exactly where `input(i)` ends.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    series: Arc<Vec<f64>>,
    dim: usize,
    seq_len: usize,
    pred_len: usize,
    starts: Vec<usize>,
    pub split: Split,
    pub scaler: Option<Scaler>,
}

/// Cut `floor((len - L - T) / stride) + 1` windows from `series`.
pub fn make_windows(
    series: &RawSeries,
    seq_len: usize,
    pred_len: usize,
    stride: usize,
    split: Split,
) -> Result<WindowedDataset> {
    if stride == 0 || seq_len == 0 || pred_len == 0 {
        return Err(Error::Config("seq_len, pred_len and stride must be >= 1".into()));
    }
    let len = series.len();
    if seq_len + pred_len > len {
        return Err(Error::Data(format!(
            "{split:?} split has {len} rows, fewer than seq_len + pred_len = {}",
            seq_len + pred_len
        )));
    }
    let n = (len - seq_len - pred_len) / stride + 1;
    Ok(WindowedDataset {
        series: Arc::new(series.values.clone()),
        dim: series.dim(),
        seq_len,
        pred_len,
        starts: (0..n).map(|i| i * stride).collect(),
        split,
        scaler: None,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn pred_len(&self) -> usize {
        self.pred_len
    }

    /// `L × D` rows of window `i`, row-major.
    pub fn input(&self, i: usize) -> &[f64] {
        let s = self.starts[i];
        &self.series[s * self.dim..(s + self.seq_len) * self.dim]
    }

    /// `T × D` rows immediately following `input(i)`.
    pub fn target(&self, i: usize) -> &[f64] {
        let s = self.starts[i] + self.seq_len;
        &self.series[s * self.dim..(s + self.pred_len) * self.dim]
    }

    /// Stack windows into `[B, L, D]` inputs and `[B, T, D]` targets.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> (Tensor<S>, Tensor<S>) {
        let b = indices.len();
        let mut x = Vec::with_capacity(b * self.seq_len * self.dim);
        let mut y = Vec::with_capacity(b * self.pred_len * self.dim);
        for &i in indices {
            x.extend(self.input(i).iter().map(|&v| S::lit(v)));
            y.extend(self.target(i).iter().map(|&v| S::lit(v)));
        }
        (
            Tensor::from_parts(vec![b, self.seq_len, self.dim], x),
            Tensor::from_parts(vec![b, self.pred_len, self.dim], y),
        )
    }
}

/// Standardized, windowed train/val/test splits of one series.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub scaler: Scaler,
}

pub fn prepare(
    series: &RawSeries,
    ratios: (f64, f64, f64),
    seq_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<DataSplits> {
    let ([train, val, test], scaler) = split_and_standardize(series, ratios)?;
    let mut sets = [
        make_windows(&train, seq_len, pred_len, stride, Split::Train)?,
        make_windows(&val, seq_len, pred_len, stride, Split::Val)?,
        make_windows(&test, seq_len, pred_len, stride, Split::Test)?,
    ];
    for s in sets.iter_mut() {
        s.scaler = Some(scaler.clone());
    }
    let [train, val, test] = sets;
    Ok(DataSplits {
        train,
        val,
        test,
        scaler,
    })
}
