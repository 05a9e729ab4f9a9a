//! Ridge forecasting head and the evaluation protocol.
//!
//! Features (representations, or raw windows with `origin_data`) of every
//! stride-1 window are regressed onto the next `T` values. The head is fit on
//! the train split, alpha is picked on the val split and errors are reported
//! on the test split, all on the z-scored scale.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, Checkpoint};
use crate::data::{self, ChannelMode, EvalPosition, SeriesDataset, SplitName};
use crate::{Error, Result};

/// Default alpha grid.
pub const ALPHA_GRID: [f64; 13] = [
    0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0,
];

/// Relative pivot size below which an unregularized system counts as singular.
const SINGULAR_RTOL: f64 = 1e-10;

/// `y = W^T r + b` with `W: [d, T]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub alpha: f64,
    pub dim: usize,
    pub horizon: usize,
}

impl RidgeModel {
    pub fn predict(&self, r: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, &ri) in r.iter().enumerate() {
            let row = &self.w[i * self.horizon..][..self.horizon];
            y.iter_mut().zip(row).for_each(|(yv, wv)| *yv += ri * wv);
        }
        y
    }
}

/// Centered second moments of a design: `G = Rc^T Rc`, `H = Rc^T Yc`.
#[derive(Debug, Clone)]
pub struct GramStats {
    g: DMatrix<f64>,
    h: DMatrix<f64>,
    r_mean: DVector<f64>,
    y_mean: DVector<f64>,
    rows: usize,
}

/// Rows processed per block when accumulating moments.
const BLOCK: usize = 1024;

impl GramStats {
    /// Builds the moments from `rows` feature/target pairs supplied by
    /// `fill(i, r, y)`. Two passes: means first, then centered products.
    pub fn collect(
        rows: usize,
        dim: usize,
        horizon: usize,
        mut fill: impl FnMut(usize, &mut [f64], &mut [f64]),
    ) -> Result<Self> {
        if rows == 0 || dim == 0 || horizon == 0 {
            return Err(Error::Shape(format!(
                "empty design: {rows} rows, {dim} features, {horizon} targets"
            )));
        }
        let mut r = vec![0.0; dim];
        let mut y = vec![0.0; horizon];
        let mut r_mean = DVector::zeros(dim);
        let mut y_mean = DVector::zeros(horizon);
        for i in 0..rows {
            fill(i, &mut r, &mut y);
            if !r.iter().chain(&y).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("design row {i}")));
            }
            r_mean += DVector::from_column_slice(&r);
            y_mean += DVector::from_column_slice(&y);
        }
        r_mean /= rows as f64;
        y_mean /= rows as f64;
        let mut g = DMatrix::zeros(dim, dim);
        let mut h = DMatrix::zeros(dim, horizon);
        let mut start = 0;
        while start < rows {
            let n = BLOCK.min(rows - start);
            let mut rb = DMatrix::zeros(n, dim);
            let mut yb = DMatrix::zeros(n, horizon);
            for k in 0..n {
                fill(start + k, &mut r, &mut y);
                for j in 0..dim {
                    rb[(k, j)] = r[j] - r_mean[j];
                }
                for j in 0..horizon {
                    yb[(k, j)] = y[j] - y_mean[j];
                }
            }
            g += rb.tr_mul(&rb);
            h += rb.tr_mul(&yb);
            start += n;
        }
        Ok(GramStats {
            g,
            h,
            r_mean,
            y_mean,
            rows,
        })
    }

    /// Dense row-major `r: [M, dim]`, `y: [M, horizon]`.
    pub fn from_dense(r: &[f64], y: &[f64], dim: usize, horizon: usize) -> Result<Self> {
        if dim == 0 || horizon == 0 || r.len() % dim != 0 || y.len() % horizon != 0 {
            return Err(Error::Shape("design matrices are not whole rows".into()));
        }
        let rows = r.len() / dim;
        if y.len() / horizon != rows {
            return Err(Error::Shape(format!(
                "{rows} feature rows but {} target rows",
                y.len() / horizon
            )));
        }
        Self::collect(rows, dim, horizon, |i, rr, yy| {
            rr.copy_from_slice(&r[i * dim..][..dim]);
            yy.copy_from_slice(&y[i * horizon..][..horizon]);
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    fn model(&self, w: DMatrix<f64>, alpha: f64) -> RidgeModel {
        let (dim, horizon) = (self.g.nrows(), self.h.ncols());
        let b = &self.y_mean - w.tr_mul(&self.r_mean);
        let mut wr = Vec::with_capacity(dim * horizon);
        for i in 0..dim {
            for j in 0..horizon {
                wr.push(w[(i, j)]);
            }
        }
        RidgeModel {
            w: wr,
            b: b.iter().copied().collect(),
            alpha,
            dim,
            horizon,
        }
    }

    /// Solves `(G + alpha I) W = H` by Cholesky.
    pub fn solve(&self, alpha: f64) -> Result<RidgeModel> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        let dim = self.g.nrows();
        let mut a = self.g.clone();
        for i in 0..dim {
            a[(i, i)] += alpha;
        }
        let scale = (0..dim).map(|i| a[(i, i)]).fold(0.0, f64::max);
        let chol = a.cholesky().ok_or(Error::SingularMatrix)?;
        let l = chol.l_dirty();
        let tiny = (0..dim).any(|i| l[(i, i)] * l[(i, i)] <= SINGULAR_RTOL * scale);
        if tiny || scale == 0.0 {
            return Err(Error::SingularMatrix);
        }
        let w = chol.solve(&self.h);
        Ok(self.model(w, alpha))
    }

    /// Minimum-norm least squares via the pseudo-inverse of `G`.
    pub fn solve_pinv(&self) -> Result<RidgeModel> {
        let svd = self.g.clone().svd(true, true);
        let tol = svd.singular_values.max() * SINGULAR_RTOL;
        let pinv = svd
            .pseudo_inverse(tol.max(f64::MIN_POSITIVE))
            .map_err(|_| Error::SingularMatrix)?;
        Ok(self.model(pinv * &self.h, 0.0))
    }
}

/// Ridge regression on centered data with an unpenalized intercept.
pub fn fit_ridge(r: &[f64], y: &[f64], dim: usize, horizon: usize, alpha: f64) -> Result<RidgeModel> {
    GramStats::from_dense(r, y, dim, horizon)?.solve(alpha)
}

/// Unregularized least squares; falls back to the minimum-norm solution when
/// the features are rank deficient.
pub fn fit_linear(r: &[f64], y: &[f64], dim: usize, horizon: usize) -> Result<RidgeModel> {
    let stats = GramStats::from_dense(r, y, dim, horizon)?;
    linear_from_stats(&stats)
}

fn linear_from_stats(stats: &GramStats) -> Result<RidgeModel> {
    match stats.solve(0.0) {
        Err(Error::SingularMatrix) => stats.solve_pinv(),
        other => other,
    }
}

/// Pooled squared and absolute error sums.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSums {
    pub sq: f64,
    pub abs: f64,
    pub count: usize,
}

impl ErrorSums {
    pub fn add(&mut self, pred: &[f64], target: &[f64]) {
        for (p, t) in pred.iter().zip(target) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.count += pred.len();
    }

    pub fn mse(&self) -> f64 {
        self.sq / self.count.max(1) as f64
    }

    pub fn mae(&self) -> f64 {
        self.abs / self.count.max(1) as f64
    }
}

/// Grid alpha with the lowest validation MSE; ties go to the smaller alpha.
pub fn select_alpha(
    train: &GramStats,
    grid: &[f64],
    mut val_error: impl FnMut(&RidgeModel) -> f64,
) -> Result<(f64, RidgeModel)> {
    let mut grid = grid.to_vec();
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    grid.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64, RidgeModel)> = None;
    for &alpha in &grid {
        let model = train.solve(alpha)?;
        let err = val_error(&model);
        if best.as_ref().is_none_or(|(_, e, _)| err < *e) {
            best = Some((alpha, err, model));
        }
    }
    let (alpha, _, model) = best.expect("grid is non-empty");
    Ok((alpha, model))
}

/// [`select_alpha`] on dense train / validation designs.
pub fn select_alpha_dense(
    r_train: &[f64],
    y_train: &[f64],
    r_val: &[f64],
    y_val: &[f64],
    dim: usize,
    horizon: usize,
    grid: &[f64],
) -> Result<f64> {
    let stats = GramStats::from_dense(r_train, y_train, dim, horizon)?;
    let (alpha, _) = select_alpha(&stats, grid, |m| {
        let mut e = ErrorSums::default();
        for (r, y) in r_val.chunks(dim).zip(y_val.chunks(horizon)) {
            e.add(&m.predict(r), y);
        }
        e.mse()
    })?;
    Ok(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// All variables pooled.
    Multivariate,
    /// Only the designated target variable.
    Univariate,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Multivariate => "multivariate",
            Protocol::Univariate => "univariate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub channel_mode: ChannelMode,
    /// Variable name used by the univariate protocol; skipped when `None`.
    pub target_variable: Option<String>,
    pub alpha_grid: Vec<f64>,
    /// Regress on the raw input window instead of the representation.
    pub origin_data: bool,
    /// Unregularized least squares instead of the ridge grid.
    pub linear_head: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: vec![24, 48, 168, 336, 720],
            channel_mode: ChannelMode::Independent,
            target_variable: None,
            alpha_grid: ALPHA_GRID.to_vec(),
            origin_data: false,
            linear_head: false,
        }
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One `(dataset, protocol, horizon, seed)` result. `seed` is `None` for
/// the row that averages several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub schema_version: u32,
    pub dataset: String,
    pub variant: String,
    pub protocol: Protocol,
    pub horizon: usize,
    pub split: String,
    pub mse: f64,
    pub mae: f64,
    pub alpha_selected: f64,
    pub seed: Option<u64>,
    pub windows: usize,
    pub fingerprint: String,
}

pub const REPORT_CSV_HEADER: &str =
    "schema_version,dataset,variant,protocol,horizon,split,mse,mae,alpha_selected,seed,windows,fingerprint";

impl ForecastReport {
    pub fn csv_row(&self) -> String {
        let seed = self.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.schema_version,
            self.dataset,
            self.variant,
            self.protocol.as_str(),
            self.horizon,
            self.split,
            self.mse,
            self.mae,
            self.alpha_selected,
            seed,
            self.windows,
            self.fingerprint
        )
    }
}

/// Averages reports that share `(protocol, horizon)` into rows with `seed = None`.
pub fn mean_rows(reports: &[ForecastReport]) -> Vec<ForecastReport> {
    let mut out: Vec<(ForecastReport, usize)> = Vec::new();
    for r in reports.iter().filter(|r| r.seed.is_some()) {
        match out
            .iter_mut()
            .find(|(m, _)| m.protocol == r.protocol && m.horizon == r.horizon && m.variant == r.variant)
        {
            Some((m, n)) => {
                m.mse += r.mse;
                m.mae += r.mae;
                m.alpha_selected += r.alpha_selected;
                *n += 1;
            }
            None => out.push((ForecastReport { seed: None, ..r.clone() }, 1)),
        }
    }
    out.into_iter()
        .map(|(mut m, n)| {
            let n = n as f64;
            m.mse /= n;
            m.mae /= n;
            m.alpha_selected /= n;
            m
        })
        .collect()
}

pub fn write_reports(csv_path: impl AsRef<Path>, jsonl_path: impl AsRef<Path>, reports: &[ForecastReport]) -> Result<()> {
    let (csv_path, jsonl_path) = (csv_path.as_ref(), jsonl_path.as_ref());
    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    let mut jsonl = String::new();
    for r in reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        let _ = writeln!(jsonl, "{}", serde_json::to_string(r).expect("report serializes"));
    }
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    std::fs::write(jsonl_path, jsonl).map_err(|e| Error::io(jsonl_path, e))
}

/// Features for every window that fits in a split, before horizon filtering.
struct SplitFeatures {
    positions: Vec<EvalPosition>,
    feats: Vec<f64>,
    dim: usize,
}

fn split_features(
    ck: &Checkpoint,
    ds: &SeriesDataset,
    split: SplitName,
    cfg: &EvalConfig,
    variable: Option<usize>,
) -> Result<SplitFeatures> {
    let lookback = ck.config.input_len;
    let mut positions = data::eval_positions(ds, split, lookback, 0, cfg.channel_mode)
        .map_err(|e| match e {
            Error::WindowTooLong { available, .. } => Error::WindowTooLong {
                needed: lookback,
                available,
            },
            other => other,
        })?;
    if let (Some(c), ChannelMode::Independent) = (variable, cfg.channel_mode) {
        positions.retain(|p| p.variable == Some(c));
    }
    let windows: Vec<Vec<f64>> = positions.iter().map(|&p| ds.window(p, lookback).values).collect();
    let (feats, dim) = if cfg.origin_data {
        let dim = windows.first().map_or(0, Vec::len);
        (windows.concat(), dim)
    } else {
        let refs: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
        let reps = backbone::encode_windows(&ck.online, &ck.config, &refs)?;
        (reps.concat(), ck.config.d_rep)
    };
    Ok(SplitFeatures {
        positions,
        feats,
        dim,
    })
}

impl SplitFeatures {
    /// Rows whose `horizon`-step target stays inside `split`.
    fn rows(&self, ds: &SeriesDataset, split: SplitName, lookback: usize, horizon: usize) -> Vec<usize> {
        let end = ds.split.range(split).end;
        (0..self.positions.len())
            .filter(|&i| self.positions[i].start + lookback + horizon <= end)
            .collect()
    }
}

/// Target of one window under a protocol.
fn target(
    ds: &SeriesDataset,
    pos: EvalPosition,
    lookback: usize,
    horizon: usize,
    variable: Option<usize>,
) -> Vec<f64> {
    match (pos.variable, variable) {
        (None, Some(c)) => ds.column(c, pos.start + lookback..pos.start + lookback + horizon),
        _ => data::eval_target(ds, pos, lookback, horizon),
    }
}

/// Runs the forecasting protocol for every configured horizon. Produces
/// multivariate rows and, when a target variable is set, univariate rows.
pub fn evaluate(
    ck: &Checkpoint,
    ds: &SeriesDataset,
    cfg: &EvalConfig,
    seed: u64,
    variant: &str,
    fingerprint: &str,
) -> Result<Vec<ForecastReport>> {
    let want = match cfg.channel_mode {
        ChannelMode::Independent => 1,
        ChannelMode::Mix => ds.channels(),
    };
    if ck.config.in_channels != want {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint encodes {} channels, evaluation needs {want}",
            ck.config.in_channels
        )));
    }
    let lookback = ck.config.input_len;
    let mut protocols = vec![(Protocol::Multivariate, None)];
    if let Some(name) = &cfg.target_variable {
        let c = ds
            .variable_index(name)
            .ok_or_else(|| Error::Config(format!("target variable `{name}` not in dataset")))?;
        protocols.push((Protocol::Univariate, Some(c)));
    }
    let mut reports = Vec::new();
    for (protocol, variable) in protocols {
        let feats: Vec<SplitFeatures> = [SplitName::Train, SplitName::Val, SplitName::Test]
            .iter()
            .map(|&s| split_features(ck, ds, s, cfg, variable))
            .collect::<Result<_>>()?;
        let [train, val, test] = [&feats[0], &feats[1], &feats[2]];
        for &horizon in &cfg.horizons {
            let rows_of = |f: &SplitFeatures, s| f.rows(ds, s, lookback, horizon);
            let (tr, va, te) = (
                rows_of(train, SplitName::Train),
                rows_of(val, SplitName::Val),
                rows_of(test, SplitName::Test),
            );
            for (rows, s) in [(&tr, SplitName::Train), (&va, SplitName::Val), (&te, SplitName::Test)] {
                if rows.is_empty() {
                    return Err(Error::WindowTooLong {
                        needed: lookback + horizon,
                        available: ds.split.range(s).len(),
                    });
                }
            }
            let out_dim = target(ds, train.positions[0], lookback, horizon, variable).len();
            let dim = train.dim;
            let stats = GramStats::collect(tr.len(), dim, out_dim, |i, r, y| {
                let row = tr[i];
                r.copy_from_slice(&train.feats[row * dim..][..dim]);
                y.copy_from_slice(&target(ds, train.positions[row], lookback, horizon, variable));
            })?;
            let errors = |f: &SplitFeatures, rows: &[usize], m: &RidgeModel| {
                let mut e = ErrorSums::default();
                for &row in rows {
                    let pred = m.predict(&f.feats[row * dim..][..dim]);
                    e.add(&pred, &target(ds, f.positions[row], lookback, horizon, variable));
                }
                e
            };
            let model = if cfg.linear_head {
                linear_from_stats(&stats)?
            } else {
                select_alpha(&stats, &cfg.alpha_grid, |m| errors(val, &va, m).mse())?.1
            };
            let e = errors(test, &te, &model);
            reports.push(ForecastReport {
                schema_version: REPORT_SCHEMA_VERSION,
                dataset: ds.id.clone(),
                variant: variant.to_string(),
                protocol,
                horizon,
                split: SplitName::Test.as_str().to_string(),
                mse: e.mse(),
                mae: e.mae(),
                alpha_selected: model.alpha,
                seed: Some(seed),
                windows: te.len(),
                fingerprint: fingerprint.to_string(),
            });
        }
    }
    Ok(reports)
}
