//! The dual-branch encoder.
//!
//! Both components of a view go through the same per-timestep linear
//! projection. The trend component then passes through one causal
//! convolution per kernel size, and the branch outputs are averaged. The
//! periodic component is transformed with a real FFT over time, mixed by an
//! independent complex linear map per frequency bin and transformed back.
//! The two branch outputs at the last time step are concatenated.
//!
//! # Checkpoint layout
//!
//! A checkpoint is a single JSON object:
//!
//! ```text
//! {
//!   "format": "tsrep-checkpoint",
//!   "version": 1,
//!   "config": { BackboneConfig fields },
//!   "seed": <u64 master seed>,
//!   "step": <u64 optimizer steps taken>,
//!   "online":   { "proj_w": T, "proj_b": T, "trend": [T, ...], "periodic": T | null },
//!   "momentum": { same layout as "online" },
//!   "fingerprint": "<config hash>" | null
//! }
//! ```
//!
//! where each `T` is `{"shape": [..], "data": [..], "complex": bool}` with
//! row-major data and complex values interleaved as `(re, im)`. Floats are
//! written with shortest round-trip formatting, so loading reproduces every
//! parameter bit for bit.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Value};
use crate::spectral;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// An encoder branch that can be ablated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Trend,
    Periodicity,
}

/// How the multi-kernel trend outputs are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendPool {
    /// Average across kernel sizes, keep the time axis.
    #[default]
    Branches,
    /// Average across kernel sizes and then over time.
    Time,
}

/// Which time steps of the per-step representation are returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timesteps {
    #[default]
    Last,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub d_rep: usize,
    pub kernel_sizes: Vec<usize>,
    pub input_len: usize,
    /// 1 for channel-independent input, `C` for channel mix.
    pub in_channels: usize,
    #[serde(default)]
    pub drop: Option<Branch>,
    #[serde(default)]
    pub trend_pool: TrendPool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            d_rep: 320,
            kernel_sizes: vec![1, 2, 4, 8, 16, 32],
            input_len: 336,
            in_channels: 1,
            drop: None,
            trend_pool: TrendPool::Branches,
        }
    }
}

impl BackboneConfig {
    pub fn d_trend(&self) -> usize {
        match self.drop {
            None => self.d_rep / 2,
            Some(Branch::Trend) => 0,
            Some(Branch::Periodicity) => self.d_rep,
        }
    }

    pub fn d_periodic(&self) -> usize {
        self.d_rep - self.d_trend()
    }

    pub fn bins(&self) -> usize {
        spectral::rfft_bins(self.input_len)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.in_channels == 0 || self.input_len == 0 {
            return fail("d_model, in_channels and input_len must be positive".into());
        }
        if self.d_rep == 0 || self.d_rep % 2 != 0 {
            return fail(format!("d_rep must be positive and even, got {}", self.d_rep));
        }
        if self.drop != Some(Branch::Trend) {
            if self.kernel_sizes.is_empty() {
                return fail("kernel_sizes must not be empty".into());
            }
            if let Some(&k) = self
                .kernel_sizes
                .iter()
                .find(|&&k| k == 0 || k > self.input_len)
            {
                return fail(format!(
                    "kernel size {k} not in 1..={}",
                    self.input_len
                ));
            }
        }
        Ok(())
    }

    /// Removes one branch and widens the other to the full `d_rep`.
    pub fn ablate(&self, drop: Branch) -> Result<Self> {
        match self.drop {
            Some(d) if d != drop => Err(Error::Config(
                "cannot drop both the trend and the periodicity branch".into(),
            )),
            _ => Ok(BackboneConfig {
                drop: Some(drop),
                ..self.clone()
            }),
        }
    }
}

/// All learnable weights of one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    /// `[in_channels, d_model]`
    pub proj_w: Tensor,
    /// `[d_model]`
    pub proj_b: Tensor,
    /// One `[k, d_model, d_trend]` kernel per kernel size; empty when the
    /// trend branch is dropped.
    pub trend: Vec<Tensor>,
    /// Complex `[bins, d_model, d_periodic]`.
    pub periodic: Option<Tensor>,
}

fn uniform<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// `(shape, complex)` of every parameter tensor, in [`BackboneParams::tensors`] order.
fn expected_shapes(cfg: &BackboneConfig) -> Vec<(Vec<usize>, bool)> {
    let dm = cfg.d_model;
    let mut v = vec![(vec![cfg.in_channels, dm], false), (vec![dm], false)];
    if cfg.d_trend() > 0 {
        v.extend(cfg.kernel_sizes.iter().map(|&k| (vec![k, dm, cfg.d_trend()], false)));
    }
    if cfg.d_periodic() > 0 {
        v.push((vec![cfg.bins(), dm, cfg.d_periodic()], true));
    }
    v
}

impl BackboneParams {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, dm) = (cfg.in_channels, cfg.d_model);
        let proj_w = Tensor::new(&[c, dm], uniform(c * dm, c, rng))?;
        let proj_b = Tensor::new(&[dm], uniform(dm, c, rng))?;
        let trend = if cfg.d_trend() > 0 {
            cfg.kernel_sizes
                .iter()
                .map(|&k| {
                    let n = k * dm * cfg.d_trend();
                    Tensor::new(&[k, dm, cfg.d_trend()], uniform(n, k * dm, rng))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let periodic = if cfg.d_periodic() > 0 {
            let shape = [cfg.bins(), dm, cfg.d_periodic()];
            let n: usize = 2 * shape.iter().product::<usize>();
            Some(Tensor::new_complex(&shape, uniform(n, dm, rng))?)
        } else {
            None
        };
        Ok(BackboneParams {
            proj_w,
            proj_b,
            trend,
            periodic,
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        BackboneParams {
            proj_w: self.proj_w.zeros_like(),
            proj_b: self.proj_b.zeros_like(),
            trend: self.trend.iter().map(Tensor::zeros_like).collect(),
            periodic: self.periodic.as_ref().map(Tensor::zeros_like),
        }
    }

    /// Parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.proj_w, &self.proj_b];
        v.extend(self.trend.iter());
        v.extend(self.periodic.iter());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.proj_w, &mut self.proj_b];
        v.extend(self.trend.iter_mut());
        v.extend(self.periodic.iter_mut());
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.shape == y.shape && x.complex == y.complex)
    }

    /// Checks the tensor shapes against `cfg`.
    pub fn check(&self, cfg: &BackboneConfig) -> Result<()> {
        cfg.validate()
            .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        let got: Vec<(&[usize], bool)> = self
            .tensors()
            .into_iter()
            .map(|t| (t.shape.as_slice(), t.complex))
            .collect();
        let want = expected_shapes(cfg);
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(a, b)| a.0 == b.0.as_slice() && a.1 == b.1);
        if same {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(
                "parameter shapes do not match the backbone config".into(),
            ))
        }
    }

    /// Adds every tensor to `g`; `trainable` controls gradient tracking.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> ParamNodes {
        let mut add = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ParamNodes {
            proj_w: add(&self.proj_w),
            proj_b: add(&self.proj_b),
            trend: self.trend.iter().map(&mut add).collect(),
            periodic: self.periodic.as_ref().map(add),
        }
    }
}

/// Graph handles for one [`BackboneParams`], in [`BackboneParams::tensors`]
/// order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub proj_w: Value,
    pub proj_b: Value,
    pub trend: Vec<Value>,
    pub periodic: Option<Value>,
}

impl ParamNodes {
    pub fn values(&self) -> Vec<Value> {
        let mut v = vec![self.proj_w, self.proj_b];
        v.extend(self.trend.iter().copied());
        v.extend(self.periodic);
        v
    }
}

/// Builds the encoder on `g`. `periodic` and `trend` are `[B, L, C]`.
/// Returns `[B, d_rep]` for [`Timesteps::Last`] and `[B, L, d_rep]` for
/// [`Timesteps::All`].
pub fn encode_graph(
    g: &mut Graph,
    cfg: &BackboneConfig,
    p: &ParamNodes,
    periodic: Value,
    trend: Value,
    steps: Timesteps,
) -> Result<Value> {
    let len = cfg.input_len;
    for v in [periodic, trend] {
        let s = g.shape(v);
        if s.len() != 3 || s[1] != len || s[2] != cfg.in_channels {
            return Err(Error::Shape(format!(
                "encode: view {s:?} does not match [B, {len}, {}]",
                cfg.in_channels
            )));
        }
    }
    if steps == Timesteps::All && cfg.trend_pool == TrendPool::Time {
        return Err(Error::Config(
            "trend_pool=time cannot produce per-step representations".into(),
        ));
    }
    let mut parts = Vec::with_capacity(2);

    if !p.trend.is_empty() {
        let h = g.linear(trend, p.proj_w, Some(p.proj_b))?;
        let n_out = match (cfg.trend_pool, steps) {
            (TrendPool::Branches, Timesteps::Last) => 1,
            _ => len,
        };
        let mut acc = None;
        for &kernel in &p.trend {
            let y = g.conv1d_causal_tail(h, kernel, n_out)?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        let sum = acc.expect("trend branch has kernels");
        let avg = g.scale(sum, 1.0 / p.trend.len() as f64);
        let out = match (cfg.trend_pool, steps) {
            (TrendPool::Time, _) => g.mean_over(avg, 1)?,
            (TrendPool::Branches, Timesteps::Last) => g.take_timestep(avg, 0)?,
            (TrendPool::Branches, Timesteps::All) => avg,
        };
        parts.push(out);
    }

    if let Some(w) = p.periodic {
        let h = g.linear(periodic, p.proj_w, Some(p.proj_b))?;
        let z = g.rfft(h)?;
        let z = g.complex_linear(z, w)?;
        let y = g.irfft(z, len)?;
        let out = match steps {
            Timesteps::Last => g.take_timestep(y, len - 1)?,
            Timesteps::All => y,
        };
        parts.push(out);
    }

    let axis = g.shape(parts[0]).len() - 1;
    let rep = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts, axis)?
    };
    if !g.value(rep).is_finite() {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(rep)
}

/// Forward-only encoding of `batch` views. `periodic` and `trend` are
/// `[batch, L, C]` row-major. Returns `[batch, d_rep]`.
pub fn encode(
    params: &BackboneParams,
    cfg: &BackboneConfig,
    periodic: &[f64],
    trend: &[f64],
    batch: usize,
) -> Result<Tensor> {
    let shape = [batch, cfg.input_len, cfg.in_channels];
    let mut g = Graph::new();
    let nodes = params.attach(&mut g, false);
    let pv = g.constant(Tensor::new(&shape, periodic.to_vec())?);
    let tv = g.constant(Tensor::new(&shape, trend.to_vec())?);
    let rep = encode_graph(&mut g, cfg, &nodes, pv, tv, Timesteps::Last)?;
    Ok(g.value(rep).clone())
}

/// Number of windows encoded per forward pass in the batch helpers.
pub const ENCODE_CHUNK: usize = 256;

/// Encodes raw windows (time-major `[L × C]` each), feeding the same values
/// to both branches. Returns one `d_rep` row per window.
pub fn encode_windows(
    params: &BackboneParams,
    cfg: &BackboneConfig,
    windows: &[&[f64]],
) -> Result<Vec<Vec<f64>>> {
    let per = cfg.input_len * cfg.in_channels;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(ENCODE_CHUNK) {
        let mut flat = Vec::with_capacity(chunk.len() * per);
        for w in chunk {
            if w.len() != per {
                return Err(Error::Shape(format!(
                    "window of {} values, expected {per}",
                    w.len()
                )));
            }
            flat.extend_from_slice(w);
        }
        let rep = encode(params, cfg, &flat, &flat, chunk.len())?;
        out.extend(rep.data.chunks(cfg.d_rep).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Representation at every `stride`-th time step of a univariate series,
/// starting at the first step with a full window behind it. Each entry is
/// `(t, r_t)` where `r_t` only depends on `x[..=t]`.
pub fn encode_series(
    x: &[f64],
    params: &BackboneParams,
    cfg: &BackboneConfig,
    stride: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let len = cfg.input_len;
    if cfg.in_channels != 1 {
        return Err(Error::Config("encode_series needs in_channels = 1".into()));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if x.len() < len {
        return Err(Error::WindowTooLong {
            needed: len,
            available: x.len(),
        });
    }
    let ends: Vec<usize> = (len - 1..x.len()).step_by(stride).collect();
    let windows: Vec<&[f64]> = ends.iter().map(|&t| &x[t + 1 - len..=t]).collect();
    let reps = encode_windows(params, cfg, &windows)?;
    Ok(ends.into_iter().zip(reps).collect())
}

const CHECKPOINT_FORMAT: &str = "tsrep-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialized encoder state; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: BackboneConfig,
    pub seed: u64,
    pub step: u64,
    pub online: BackboneParams,
    pub momentum: BackboneParams,
    /// Hash of the resolved run configuration, when written by the CLI.
    #[serde(default)]
    pub fingerprint: Option<String>,
}

impl Checkpoint {
    pub fn new(
        config: BackboneConfig,
        seed: u64,
        step: u64,
        online: BackboneParams,
        momentum: BackboneParams,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            seed,
            step,
            online,
            momentum,
            fingerprint: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)
            .map_err(|e| Error::CheckpointMismatch(format!("unreadable checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        ck.online.check(&ck.config)?;
        ck.momentum.check(&ck.config)?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            d_model: 4,
            d_rep: 6,
            kernel_sizes: vec![1, 2, 4],
            input_len: 12,
            in_channels: 1,
            drop: None,
            trend_pool: TrendPool::Branches,
        }
    }

    fn series(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn default_output_is_320_wide() {
        let cfg = BackboneConfig {
            input_len: 64,
            ..BackboneConfig::default()
        };
        let p = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = series(3 * 64, 1);
        let r = encode(&p, &cfg, &x, &x, 3).unwrap();
        assert_eq!(r.shape, vec![3, 320]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = small_cfg();
        let p = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .zeros_like();
        let x = series(2 * 12, 3);
        let r = encode(&p, &cfg, &x, &x, 2).unwrap();
        assert!(r.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let cfg = small_cfg();
        let p = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let a = series(12, 1);
        let b = series(12, 2);
        let ab = [a.clone(), b.clone()].concat();
        let ba = [b, a].concat();
        let r1 = encode(&p, &cfg, &ab, &ab, 2).unwrap();
        let r2 = encode(&p, &cfg, &ba, &ba, 2).unwrap();
        for (x, y) in r1.data[..6].iter().zip(&r2.data[6..]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ablate_widens_remaining_branch() {
        let cfg = BackboneConfig::default();
        let t = cfg.ablate(Branch::Trend).unwrap();
        assert_eq!((t.d_trend(), t.d_periodic()), (0, 320));
        let p = cfg.ablate(Branch::Periodicity).unwrap();
        assert_eq!((p.d_trend(), p.d_periodic()), (320, 0));
        assert_eq!((cfg.d_trend(), cfg.d_periodic()), (160, 160));
        assert!(matches!(t.ablate(Branch::Periodicity), Err(Error::Config(_))));
        let params = BackboneParams::init(
            &BackboneConfig { input_len: 32, ..t },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(params.trend.is_empty());
    }

    #[test]
    fn kernel_longer_than_window_rejected() {
        let cfg = BackboneConfig {
            input_len: 16,
            ..BackboneConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn series_window_counts() {
        let cfg = small_cfg();
        let p = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(encode_series(&series(12, 0), &p, &cfg, 1).unwrap().len(), 1);
        let reps = encode_series(&series(21, 0), &p, &cfg, 1).unwrap();
        assert_eq!(reps.len(), 10);
        assert_eq!(reps[0].0, 11);
        assert!(matches!(
            encode_series(&series(11, 0), &p, &cfg, 1),
            Err(Error::WindowTooLong { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let on = BackboneParams::init(&cfg, &mut rng).unwrap();
        let mo = BackboneParams::init(&cfg, &mut rng).unwrap();
        let ck = Checkpoint::new(cfg.clone(), 9, 17, on, mo);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let x = series(12, 4);
        let a = encode(&ck.online, &cfg, &x, &x, 1).unwrap();
        let b = encode(&back.online, &cfg, &x, &x, 1).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn checkpoint_shape_mismatch_detected() {
        let cfg = small_cfg();
        let p = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let other = BackboneConfig {
            d_model: 5,
            ..cfg
        };
        let ck = Checkpoint::new(other, 0, 0, p.clone(), p);
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json()),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
