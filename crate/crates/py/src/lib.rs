//! Python bindings for `tsrep-core`.
//!
//! Arrays cross the boundary as nested Python lists of floats. Library
//! errors become `ValueError` (or `OSError` for file problems) with the
//! error kind as a prefix, e.g. `"ConfigError: ..."`.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use tsrep_core::augment;
use tsrep_core::backbone::{self, BackboneConfig, BackboneParams, Checkpoint};
use tsrep_core::contrastive::{self, MocoConfig, TrainSpec};
use tsrep_core::data::ChannelMode;
use tsrep_core::forecast;
use tsrep_core::synthetic::{self, SynthSpec};
use tsrep_core::tensor::Tensor;
use tsrep_core::{seed, Error};

fn py_err(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<(Vec<f64>, usize)> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    Ok((rows.concat(), width))
}

fn tensor(rows: &[Vec<f64>], width: usize, what: &str) -> PyResult<Tensor> {
    let (data, w) = matrix(rows, what)?;
    let w = if rows.is_empty() { width } else { w };
    Tensor::new(&[rows.len(), w], data).map_err(py_err)
}

/// Keeps the `k` strongest real-FFT bins of `x`.
#[pyfunction]
fn periodic_sample(x: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    augment::periodic_sample(&x, k).map_err(py_err)
}

/// Centred moving average of width `2t + 1`.
#[pyfunction]
fn trend_sample(x: Vec<f64>, t: usize) -> PyResult<Vec<f64>> {
    augment::trend_sample(&x, t).map_err(py_err)
}

/// InfoNCE summed over the rows of `q`. All rows must be unit length.
#[pyfunction]
#[pyo3(signature = (q, k_pos, queue, tau = 0.07))]
fn info_nce(q: Vec<Vec<f64>>, k_pos: Vec<Vec<f64>>, queue: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let q = tensor(&q, 0, "q")?;
    let dim = q.shape[1];
    let k = tensor(&k_pos, dim, "k_pos")?;
    let queue = tensor(&queue, dim, "queue")?;
    contrastive::info_nce(&q, &k, &queue, tau).map_err(py_err)
}

/// Labeled synthetic series: a list of `(trend, period, values)` tuples.
#[pyfunction]
#[pyo3(signature = (seed = 0, length = 1000, noise_std = 0.3))]
fn generate_synthetic(seed: u64, length: usize, noise_std: f64) -> PyResult<Vec<(usize, usize, Vec<f64>)>> {
    let spec = SynthSpec {
        length,
        noise_std,
        ..SynthSpec::default()
    };
    let series = synthetic::generate(&spec, seed).map_err(py_err)?;
    Ok(series.into_iter().map(|s| (s.trend, s.period, s.values)).collect())
}

/// Leave-one-out nearest-centroid accuracy.
#[pyfunction]
fn nearest_centroid_accuracy(points: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    synthetic::nearest_centroid_loo(&points, &labels).map_err(py_err)
}

/// A trained (or freshly initialised) encoder.
#[pyclass(module = "tsrep")]
struct Encoder {
    ck: Checkpoint,
}

#[pymethods]
impl Encoder {
    /// Randomly initialised encoder.
    #[new]
    #[pyo3(signature = (input_len = 336, d_model = 64, d_rep = 320, seed = 0))]
    fn new(input_len: usize, d_model: usize, d_rep: usize, seed: u64) -> PyResult<Self> {
        let cfg = BackboneConfig {
            input_len,
            d_model,
            d_rep,
            kernel_sizes: BackboneConfig::default()
                .kernel_sizes
                .into_iter()
                .filter(|&k| k <= input_len)
                .collect(),
            ..BackboneConfig::default()
        };
        let params = BackboneParams::init(&cfg, &mut seed::rng(seed, "init")).map_err(py_err)?;
        Ok(Encoder {
            ck: Checkpoint::new(cfg, seed, 0, params.clone(), params),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Encoder {
            ck: Checkpoint::load(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Encoder {
            ck: Checkpoint::from_json(text).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ck.save(path).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.ck.to_json()
    }

    #[getter]
    fn input_len(&self) -> usize {
        self.ck.config.input_len
    }

    #[getter]
    fn d_rep(&self) -> usize {
        self.ck.config.d_rep
    }

    #[getter]
    fn step(&self) -> u64 {
        self.ck.step
    }

    /// One representation per window; each window has `input_len` values.
    fn encode(&self, windows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
        backbone::encode_windows(&self.ck.online, &self.ck.config, &refs).map_err(py_err)
    }

    /// `(t, representation)` at every `stride`-th step of a 1-D series.
    #[pyo3(signature = (x, stride = 1))]
    fn encode_series(&self, x: Vec<f64>, stride: usize) -> PyResult<Vec<(usize, Vec<f64>)>> {
        backbone::encode_series(&x, &self.ck.online, &self.ck.config, stride).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = &self.ck.config;
        format!(
            "Encoder(input_len={}, d_model={}, d_rep={}, step={})",
            c.input_len, c.d_model, c.d_rep, self.ck.step
        )
    }
}

/// Trains an encoder on the synthetic case-study data. Returns the encoder
/// and the per-step loss trace.
#[pyfunction]
#[pyo3(signature = (seed = 0, lookback = 128, batch_size = 32, epochs = 1, max_steps = None, d_model = 64, d_rep = 320))]
fn train_synthetic(
    py: Python<'_>,
    seed: u64,
    lookback: usize,
    batch_size: usize,
    epochs: usize,
    max_steps: Option<usize>,
    d_model: usize,
    d_rep: usize,
) -> PyResult<(Encoder, Vec<f64>)> {
    // keep the augmentation ranges valid for short lookbacks
    let dflt = augment::AugmentConfig::default();
    let bins = lookback / 2 + 1;
    let widest = lookback.saturating_sub(1) / 2;
    let spec = TrainSpec {
        backbone: BackboneConfig {
            input_len: lookback,
            d_model,
            d_rep,
            ..BackboneConfig::default()
        },
        augment: augment::AugmentConfig {
            k1: dflt.k1.min(bins),
            k2: dflt.k2.min(bins),
            t1: dflt.t1.min(widest),
            t2: dflt.t2.min(widest),
            ..dflt
        },
        moco: MocoConfig {
            batch_size,
            epochs,
            max_steps,
            ..MocoConfig::default()
        },
        channel_mode: ChannelMode::Independent,
    };
    let out = py
        .detach(|| -> tsrep_core::Result<_> {
            let series = synthetic::generate(&SynthSpec::default(), seed::child(seed, "synthetic"))?;
            let ds = synthetic::to_dataset(&series)?;
            contrastive::train(&ds, &spec, seed, |_| {})
        })
        .map_err(py_err)?;
    let losses = out.trace.iter().map(|r| r.loss).collect();
    Ok((Encoder { ck: out.checkpoint }, losses))
}

/// Multi-output ridge regression with an unpenalised intercept.
#[pyclass(module = "tsrep")]
struct Ridge {
    model: forecast::RidgeModel,
}

#[pymethods]
impl Ridge {
    /// Fits `y ≈ W^T r + b`. `alpha=None` fits unregularised least squares.
    #[staticmethod]
    #[pyo3(signature = (r, y, alpha = Some(1.0)))]
    fn fit(r: Vec<Vec<f64>>, y: Vec<Vec<f64>>, alpha: Option<f64>) -> PyResult<Self> {
        if r.len() != y.len() {
            return Err(PyValueError::new_err("r and y need the same number of rows"));
        }
        let (rd, dim) = matrix(&r, "r")?;
        let (yd, horizon) = matrix(&y, "y")?;
        let model = match alpha {
            Some(a) => forecast::fit_ridge(&rd, &yd, dim, horizon, a),
            None => forecast::fit_linear(&rd, &yd, dim, horizon),
        }
        .map_err(py_err)?;
        Ok(Ridge { model })
    }

    fn predict(&self, r: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        r.iter()
            .map(|row| {
                if row.len() != self.model.dim {
                    return Err(PyValueError::new_err(format!(
                        "expected {} features, got {}",
                        self.model.dim,
                        row.len()
                    )));
                }
                Ok(self.model.predict(row))
            })
            .collect()
    }

    /// Weights as a `dim x horizon` nested list.
    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        self.model.w.chunks(self.model.horizon).map(<[f64]>::to_vec).collect()
    }

    #[getter]
    fn intercept(&self) -> Vec<f64> {
        self.model.b.clone()
    }
}

/// Runs the command-line driver in-process; returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let mut argv = vec!["tsrep".to_string()];
    argv.extend(args);
    py.detach(|| tsrep_core::cli::main_with_args(argv))
}

#[pymodule]
fn tsrep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(periodic_sample, m)?)?;
    m.add_function(wrap_pyfunction!(trend_sample, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_centroid_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(train_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Encoder>()?;
    m.add_class::<Ridge>()?;
    Ok(())
}
