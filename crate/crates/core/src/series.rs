//! Multivariate time-series container, standardization, supervised windowing
//! and file ingestion.
//!
//! Window convention used throughout the crate: an input window for origin `t`
//! holds rows `t - tau .. t - 1`, so window row `p` carries lag `tau - p` and
//! lag 1 is the last row.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("empty input")]
    Empty,
    #[error("window exceeds series length: window {window}, length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("row {row}: expected {expected} columns, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("non-numeric cell {cell:?} at ({row}, {col})")]
    NonNumeric { row: usize, col: usize, cell: String },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("duplicate variable name {0:?}")]
    DuplicateName(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `T x N` matrix of observations, one named column per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    names: Vec<String>,
    /// Row-major, `len * n_vars` entries.
    values: Vec<f64>,
    len: usize,
}

impl MultivariateSeries {
    /// Builds a series from row-major values; every value must be finite.
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self, SeriesError> {
        let n = names.len();
        if n == 0 || values.is_empty() {
            return Err(SeriesError::Empty);
        }
        if values.len() % n != 0 {
            return Err(SeriesError::Ragged {
                row: values.len() / n + 1,
                expected: n,
                found: values.len() % n,
            });
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(SeriesError::DuplicateName(name.clone()));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SeriesError::NonFinite {
                row: i / n,
                col: i % n,
            });
        }
        let len = values.len() / n;
        Ok(Self { names, values, len })
    }

    /// Builds a series from per-variable columns of equal length.
    pub fn from_columns(names: Vec<String>, columns: &[Vec<f64>]) -> Result<Self, SeriesError> {
        let len = columns.first().map_or(0, Vec::len);
        if columns.len() != names.len() {
            return Err(SeriesError::InvalidArgument(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        if let Some((j, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != len) {
            return Err(SeriesError::Ragged {
                row: c.len().min(len),
                expected: len,
                found: j,
            });
        }
        let n = columns.len();
        let mut values = vec![0.0; len * n];
        for (j, col) in columns.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                values[t * n + j] = v;
            }
        }
        Self::new(names, values)
    }

    /// Default names `v0 .. v{n-1}`.
    pub fn default_names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, var: usize) -> f64 {
        self.values[t * self.n_vars() + var]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.n_vars();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn column(&self, var: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, var)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Writes the series as CSV with a header row.
    pub fn to_csv_string(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for t in 0..self.len {
            let row: Vec<String> = self.row(t).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Per-column statistics removed by [`standardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub means: Vec<f64>,
    /// Population (1/T) standard deviations.
    pub stds: Vec<f64>,
    /// Columns with zero variance; these are shifted to zero and not scaled.
    pub zero_variance: Vec<bool>,
}

/// Rescales every column to mean 0 and population standard deviation 1.
pub fn standardize(series: &MultivariateSeries) -> Result<(MultivariateSeries, Standardization), SeriesError> {
    let t_len = series.len();
    if t_len == 0 {
        return Err(SeriesError::Empty);
    }
    if t_len < 2 {
        return Err(SeriesError::InvalidArgument(
            "standardization needs at least two rows".into(),
        ));
    }
    let n = series.n_vars();
    let mut means = vec![0.0; n];
    for t in 0..t_len {
        for (m, v) in means.iter_mut().zip(series.row(t)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= t_len as f64);
    let mut vars = vec![0.0; n];
    for t in 0..t_len {
        for ((acc, v), m) in vars.iter_mut().zip(series.row(t)).zip(&means) {
            *acc += (v - m) * (v - m);
        }
    }
    let stds: Vec<f64> = vars.iter().map(|v| (v / t_len as f64).sqrt()).collect();
    let zero_variance: Vec<bool> = stds.iter().map(|&s| s == 0.0).collect();
    let mut values = series.values().to_vec();
    for row in values.chunks_mut(n) {
        for j in 0..n {
            row[j] = if zero_variance[j] {
                0.0
            } else {
                (row[j] - means[j]) / stds[j]
            };
        }
    }
    let out = MultivariateSeries::new(series.names().to_vec(), values)?;
    Ok((
        out,
        Standardization {
            means,
            stds,
            zero_variance,
        },
    ))
}

/// One supervised example: a `tau x N` history window and the next target value.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub input: Tensor,
    pub target: f64,
    pub target_index: usize,
    pub origin_t: usize,
}

/// Chronologically ordered windows sharing one window length and target.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedDataset {
    pub samples: Vec<WindowedSample>,
    pub window: usize,
    pub target_index: usize,
    pub n_vars: usize,
}

impl SupervisedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Window row holding `lag` for a window of length `window`.
pub fn lag_to_row(lag: usize, window: usize) -> Option<usize> {
    (lag >= 1 && lag <= window).then(|| window - lag)
}

/// Lag carried by window row `row`.
pub fn row_to_lag(row: usize, window: usize) -> usize {
    window - row
}

/// Samples for origins `window, window + stride, ..., T - 1`.
pub fn make_windows(
    series: &MultivariateSeries,
    target_index: usize,
    window: usize,
    stride: usize,
) -> Result<SupervisedDataset, SeriesError> {
    let n = series.n_vars();
    if window == 0 {
        return Err(SeriesError::InvalidArgument("window must be at least 1".into()));
    }
    if stride == 0 {
        return Err(SeriesError::InvalidArgument("stride must be at least 1".into()));
    }
    if target_index >= n {
        return Err(SeriesError::InvalidArgument(format!(
            "target index {target_index} out of range for {n} variables"
        )));
    }
    if window >= series.len() {
        return Err(SeriesError::WindowTooLong {
            window,
            len: series.len(),
        });
    }
    let samples = (window..series.len())
        .step_by(stride)
        .map(|t| {
            let input = series.values()[(t - window) * n..t * n].to_vec();
            WindowedSample {
                input: Tensor::new(vec![window, n], input).expect("window buffer matches shape"),
                target: series.get(t, target_index),
                target_index,
                origin_t: t,
            }
        })
        .collect();
    Ok(SupervisedDataset {
        samples,
        window,
        target_index,
        n_vars: n,
    })
}

/// Chronological split: the first `floor(fraction * len)` samples train.
pub fn split_train_test(
    dataset: &SupervisedDataset,
    train_fraction: f64,
) -> Result<(SupervisedDataset, SupervisedDataset), SeriesError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SeriesError::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let cut = (train_fraction * dataset.len() as f64).floor() as usize;
    if cut == 0 || cut == dataset.len() {
        return Err(SeriesError::InvalidArgument(format!(
            "fraction {train_fraction} of {} samples leaves an empty partition",
            dataset.len()
        )));
    }
    let part = |samples: &[WindowedSample]| SupervisedDataset {
        samples: samples.to_vec(),
        window: dataset.window,
        target_index: dataset.target_index,
        n_vars: dataset.n_vars,
    };
    Ok((part(&dataset.samples[..cut]), part(&dataset.samples[cut..])))
}

/// Reads a rectangular numeric CSV. Error coordinates are 1-based file
/// `(line, column)`, counting a header line when present.
pub fn load_csv(path: impl AsRef<Path>, delimiter: u8, has_header: bool) -> Result<MultivariateSeries, SeriesError> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, delimiter, has_header)
}

pub fn parse_csv(text: &str, delimiter: u8, has_header: bool) -> Result<MultivariateSeries, SeriesError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut names: Option<Vec<String>> = None;
    let mut width = None;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 1;
        if i == 0 && has_header {
            names = Some(record.iter().map(str::to_string).collect());
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(SeriesError::Ragged {
                row: line,
                expected,
                found: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| SeriesError::NonNumeric {
                row: line,
                col: j + 1,
                cell: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(SeriesError::NonFinite { row: line, col: j + 1 });
            }
            values.push(v);
        }
    }
    let n = width.ok_or(SeriesError::Empty)?;
    let names = names.unwrap_or_else(|| MultivariateSeries::default_names(n));
    MultivariateSeries::new(names, values)
}

/// Target column of the SML2010 indoor-temperature dataset.
pub const SML2010_TARGET: &str = "Temperature_Comedor_Sensor";

/// Non-sensor or duplicate-target columns dropped from SML2010 besides date and time.
pub const SML2010_EXCLUDED: [&str; 2] = ["Temperature_Habitacion_Sensor", "Day_Of_Week"];

/// Reads an SML2010 text file.
pub fn load_sml2010(path: impl AsRef<Path>) -> Result<(MultivariateSeries, usize), SeriesError> {
    parse_sml2010(&fs::read_to_string(path)?)
}

/// Whitespace-separated body with a header line (optionally `#`-prefixed,
/// tokens optionally numbered as `3:Name`). The first two columns (date and
/// time) are dropped.
pub fn parse_sml2010(text: &str) -> Result<(MultivariateSeries, usize), SeriesError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(SeriesError::Empty)?;
    let header: Vec<String> = header
        .trim_start_matches('#')
        .split_whitespace()
        .map(|tok| match tok.split_once(':') {
            Some((num, name)) if num.chars().all(|c| c.is_ascii_digit()) => name.to_string(),
            _ => tok.to_string(),
        })
        .collect();
    if header.len() < 3 {
        return Err(SeriesError::InvalidArgument(
            "SML2010 header needs date, time and at least one sensor column".into(),
        ));
    }
    let sensor_names = &header[2..];
    if !sensor_names.iter().any(|n| n == SML2010_TARGET) {
        return Err(SeriesError::MissingColumn(SML2010_TARGET.into()));
    }
    let keep: Vec<usize> = sensor_names
        .iter()
        .enumerate()
        .filter(|(_, n)| !SML2010_EXCLUDED.contains(&n.as_str()))
        .map(|(i, _)| i)
        .collect();
    let mut values = Vec::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split_whitespace().collect();
        if cells.len() != header.len() {
            return Err(SeriesError::Ragged {
                row: i + 1,
                expected: header.len(),
                found: cells.len(),
            });
        }
        for &j in &keep {
            let cell = cells[j + 2];
            let v: f64 = cell.parse().map_err(|_| SeriesError::NonNumeric {
                row: i + 1,
                col: j + 3,
                cell: cell.to_string(),
            })?;
            values.push(v);
        }
    }
    let names: Vec<String> = keep.iter().map(|&j| sensor_names[j].clone()).collect();
    let target = names
        .iter()
        .position(|n| n == SML2010_TARGET)
        .expect("target column kept");
    Ok((MultivariateSeries::new(names, values)?, target))
}
