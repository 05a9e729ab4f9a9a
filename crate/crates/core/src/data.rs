//! Dataset ingest, z-score normalization, splits and windowing.

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDateTime;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the time axis is divided into train / val / test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Calendar split with 30-day months. `steps_per_month` is inferred
    /// from the first two timestamps when absent. Rows after the test
    /// months are left out, as in the usual ETT protocol.
    Months {
        train: usize,
        val: usize,
        test: usize,
        steps_per_month: Option<usize>,
    },
    /// Fractions of the series length; the test range absorbs rounding.
    Ratios { train: f64, val: f64, test: f64 },
}

impl SplitSpec {
    pub fn ett() -> Self {
        SplitSpec::Months {
            train: 12,
            val: 4,
            test: 4,
            steps_per_month: None,
        }
    }

    pub fn ratios_60_20_20() -> Self {
        SplitSpec::Ratios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }

    /// Resolves the split for a series of `len` steps sampled every
    /// `step_seconds`.
    pub fn resolve(&self, len: usize, step_seconds: Option<i64>) -> Result<Splits> {
        let (n_train, n_val, n_test) = match *self {
            SplitSpec::Months {
                train,
                val,
                test,
                steps_per_month,
            } => {
                let per_month = match (steps_per_month, step_seconds) {
                    (Some(s), _) => s,
                    (None, Some(dt)) if dt > 0 && 86_400 % dt == 0 => 30 * (86_400 / dt) as usize,
                    _ => {
                        return Err(Error::Config(
                            "month split needs data.steps_per_month or a regular timestamp column"
                                .into(),
                        ))
                    }
                };
                (train * per_month, val * per_month, test * per_month)
            }
            SplitSpec::Ratios { train, val, test } => {
                if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
                    || (train + val + test - 1.0).abs() > 1e-9
                {
                    return Err(Error::Config(format!(
                        "split ratios must be in [0, 1] and sum to 1, got {train}/{val}/{test}"
                    )));
                }
                let n_train = (train * len as f64).floor() as usize;
                let n_val = (val * len as f64).floor() as usize;
                (n_train, n_val, len.saturating_sub(n_train + n_val))
            }
        };
        if n_train == 0 || n_train + n_val > len {
            return Err(Error::Config(format!(
                "split of {n_train} train + {n_val} val steps does not fit {len} steps"
            )));
        }
        // rows past the test months stay unused
        let start = n_train + n_val;
        Ok(Splits {
            train: 0..n_train,
            val: n_train..start,
            test: start..(start + n_test).min(len),
        })
    }
}

/// Resolved, contiguous split ranges starting at 0. Rows after `test.end`
/// (the remainder of a month split) belong to no split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl Splits {
    pub fn range(&self, name: SplitName) -> Range<usize> {
        match name {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
        }
    }
}

/// Whether variables are windowed one at a time or together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    #[default]
    Independent,
    Mix,
}

/// A z-scored multivariate series.
///
/// `values` is time-major: `values[t * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub id: String,
    pub values: Vec<f64>,
    pub len: usize,
    pub variable_names: Vec<String>,
    pub split: Splits,
    pub train_mean: Vec<f64>,
    pub train_std: Vec<f64>,
}

/// A training or evaluation crop. `values` is time-major `[len × channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: Vec<f64>,
    pub channels: usize,
    /// `None` when all variables are included (channel mix).
    pub variable: Option<usize>,
    pub start: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.values.len() / self.channels.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Position of an evaluation window: `[start, start + lookback)` is the
/// input, the following `horizon` steps are the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalPosition {
    pub variable: Option<usize>,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub window: Window,
    pub target: Vec<f64>,
}

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y/%m/%d %H:%M",
];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

/// Reads a CSV with a header row. The timestamp column is only used to
/// infer the sampling step; every other column must be a finite real.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    timestamp_column: &str,
    split: &SplitSpec,
) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let ts_idx = headers.iter().position(|h| h == timestamp_column);
    let var_cols: Vec<usize> = (0..headers.len()).filter(|&i| Some(i) != ts_idx).collect();
    if var_cols.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no variable columns".into(),
        });
    }
    let names: Vec<String> = var_cols.iter().map(|&i| headers[i].to_string()).collect();

    let mut values = Vec::new();
    let mut stamps = Vec::with_capacity(2);
    let mut len = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Ingest {
            row: row + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        if let (Some(i), true) = (ts_idx, stamps.len() < 2) {
            stamps.push(record.get(i).and_then(parse_timestamp));
        }
        for (&col, name) in var_cols.iter().zip(&names) {
            let cell = record.get(col).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                row: row + 1,
                column: name.clone(),
                message: format!("cannot parse `{cell}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row: row + 1,
                    column: name.clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values.push(v);
        }
        len += 1;
    }
    let step_seconds = match stamps.as_slice() {
        [Some(a), Some(b)] => Some((*b - *a).num_seconds()),
        _ => None,
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let splits = split.resolve(len, step_seconds)?;
    SeriesDataset::from_raw(id, names, values, splits)
}

impl SeriesDataset {
    /// Normalizes raw time-major values with train-range statistics.
    pub fn from_raw(
        id: impl Into<String>,
        variable_names: Vec<String>,
        mut values: Vec<f64>,
        split: Splits,
    ) -> Result<Self> {
        let channels = variable_names.len();
        if channels == 0 || values.len() % channels != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {channels} variables",
                values.len()
            )));
        }
        let len = values.len() / channels;
        let ordered = split.train.start == 0
            && split.train.end == split.val.start
            && split.val.end == split.test.start
            && split.test.end <= len
            && split.train.start <= split.train.end
            && split.val.start <= split.val.end
            && split.test.start <= split.test.end;
        if !ordered || split.train.is_empty() {
            return Err(Error::Config(format!(
                "splits {split:?} must be contiguous, start at 0 and end by {len}"
            )));
        }
        let n = split.train.len() as f64;
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let col = split.train.clone().map(|t| values[t * channels + c]);
            mean[c] = col.clone().sum::<f64>() / n;
            let var = col.map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n;
            std[c] = var.sqrt();
            if !(std[c] > 1e-12 * mean[c].abs().max(1.0)) {
                return Err(Error::ConstantVariable {
                    name: variable_names[c].clone(),
                });
            }
        }
        for row in values.chunks_mut(channels) {
            for c in 0..channels {
                row[c] = (row[c] - mean[c]) / std[c];
            }
        }
        Ok(SeriesDataset {
            id: id.into(),
            values,
            len,
            variable_names,
            split,
            train_mean: mean,
            train_std: std,
        })
    }

    pub fn channels(&self) -> usize {
        self.variable_names.len()
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels() + c]
    }

    /// One normalized variable over `range`.
    pub fn column(&self, c: usize, range: Range<usize>) -> Vec<f64> {
        range.map(|t| self.value(t, c)).collect()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variable_names.iter().position(|n| n == name)
    }

    pub fn denormalize(&self, c: usize, v: f64) -> f64 {
        v * self.train_std[c] + self.train_mean[c]
    }

    pub fn normalize(&self, c: usize, v: f64) -> f64 {
        (v - self.train_mean[c]) / self.train_std[c]
    }

    /// Extracts the window at `pos` of length `len`.
    pub fn window(&self, pos: EvalPosition, len: usize) -> Window {
        match pos.variable {
            Some(c) => Window {
                values: self.column(c, pos.start..pos.start + len),
                channels: 1,
                variable: Some(c),
                start: pos.start,
            },
            None => {
                let ch = self.channels();
                Window {
                    values: self.values[pos.start * ch..(pos.start + len) * ch].to_vec(),
                    channels: ch,
                    variable: None,
                    start: pos.start,
                }
            }
        }
    }

    /// Number of distinct training windows of length `lookback`.
    pub fn window_count(&self, split: SplitName, lookback: usize, mode: ChannelMode) -> usize {
        let range = self.split.range(split);
        let starts = (range.len() + 1).saturating_sub(lookback);
        match mode {
            ChannelMode::Independent => starts * self.channels(),
            ChannelMode::Mix => starts,
        }
    }
}

/// Draws `count` random crops fully inside the `split` range.
pub fn sample_windows<R: Rng + ?Sized>(
    ds: &SeriesDataset,
    split: SplitName,
    count: usize,
    lookback: usize,
    mode: ChannelMode,
    rng: &mut R,
) -> Result<Vec<Window>> {
    let range = ds.split.range(split);
    if lookback == 0 || lookback > range.len() {
        return Err(Error::WindowTooLong {
            needed: lookback,
            available: range.len(),
        });
    }
    let last_start = range.end - lookback;
    Ok((0..count)
        .map(|_| {
            let variable = match mode {
                ChannelMode::Independent => Some(rng.random_range(0..ds.channels())),
                ChannelMode::Mix => None,
            };
            let start = rng.random_range(range.start..=last_start);
            ds.window(EvalPosition { variable, start }, lookback)
        })
        .collect())
}

/// Every stride-1 `(input, target)` position inside `split`, variable-major.
pub fn eval_positions(
    ds: &SeriesDataset,
    split: SplitName,
    lookback: usize,
    horizon: usize,
    mode: ChannelMode,
) -> Result<Vec<EvalPosition>> {
    let range = ds.split.range(split);
    let needed = lookback + horizon;
    if lookback == 0 || needed > range.len() {
        return Err(Error::WindowTooLong {
            needed,
            available: range.len(),
        });
    }
    let starts = range.start..=range.end - needed;
    Ok(match mode {
        ChannelMode::Independent => (0..ds.channels())
            .flat_map(|c| {
                starts.clone().map(move |start| EvalPosition {
                    variable: Some(c),
                    start,
                })
            })
            .collect(),
        ChannelMode::Mix => starts
            .map(|start| EvalPosition {
                variable: None,
                start,
            })
            .collect(),
    })
}

/// Target values following the window at `pos`: `horizon` values of the
/// same variable, or `horizon × channels` time-major values in mix mode.
pub fn eval_target(ds: &SeriesDataset, pos: EvalPosition, lookback: usize, horizon: usize) -> Vec<f64> {
    let t0 = pos.start + lookback;
    match pos.variable {
        Some(c) => ds.column(c, t0..t0 + horizon),
        None => {
            let ch = ds.channels();
            ds.values[t0 * ch..(t0 + horizon) * ch].to_vec()
        }
    }
}

/// Materialized version of [`eval_positions`].
pub fn enumerate_eval_windows(
    ds: &SeriesDataset,
    split: SplitName,
    lookback: usize,
    horizon: usize,
    mode: ChannelMode,
) -> Result<Vec<EvalPair>> {
    Ok(eval_positions(ds, split, lookback, horizon, mode)?
        .into_iter()
        .map(|pos| EvalPair {
            window: ds.window(pos, lookback),
            target: eval_target(ds, pos, lookback, horizon),
        })
        .collect())
}
