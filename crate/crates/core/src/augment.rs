//! Positive-pair generation.
//!
//! A view of a window is a `(periodic, trend)` pair. The periodic component
//! keeps the `k` strongest real-FFT bins of the window and inverts them; the
//! trend component is a centred moving average of width `2t + 1` with
//! replicate padding. `k` and `t` are drawn independently for the two views,
//! so the pair shares structure without being identical.
//!
//! [`common_transform`] is the scale / shift / jitter baseline used when the
//! augmentation mode is [`AugmentMode::CommonTrans`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::spectral;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Fourier top-k periodic view plus moving-average trend view.
    Clear,
    /// Scale / shift / jitter, used for both components of a view.
    CommonTrans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub k1: usize,
    pub k2: usize,
    pub t1: usize,
    pub t2: usize,
    pub mode: AugmentMode,
    /// Redraw the key-side `k` / `t` until it differs from the query side.
    pub strict_distinct: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            k1: 5,
            k2: 20,
            t1: 1,
            t2: 5,
            mode: AugmentMode::Clear,
            strict_distinct: false,
        }
    }
}

impl AugmentConfig {
    /// Checks the bounds against a window of length `len`.
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.k1 < 1 || self.k1 > self.k2 {
            return Err(Error::Config(format!(
                "need 1 <= k1 <= k2, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if self.t1 > self.t2 {
            return Err(Error::Config(format!(
                "need t1 <= t2, got t1={} t2={}",
                self.t1, self.t2
            )));
        }
        let bins = spectral::rfft_bins(len);
        if self.k2 > bins {
            return Err(Error::Config(format!(
                "k2={} exceeds the {bins} spectrum bins of a length-{len} window",
                self.k2
            )));
        }
        if 2 * self.t2 + 1 > len {
            return Err(Error::Config(format!(
                "t2={} gives a moving-average window wider than {len}",
                self.t2
            )));
        }
        Ok(())
    }
}

/// One augmented view. Both arrays are time-major `[L × channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub periodic: Vec<f64>,
    pub trend: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub query: View,
    pub key: View,
    /// Sampled parameters; all zero in `CommonTrans` mode.
    pub k_q: usize,
    pub k_k: usize,
    pub t_q: usize,
    pub t_k: usize,
}

/// Indices of the `k` largest-amplitude bins; ties go to the lower index.
pub fn top_k_bins(spec: &[Complex64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..spec.len()).collect();
    // stable sort keeps lower indices first among equal amplitudes
    idx.sort_by(|&a, &b| spec[b].norm().total_cmp(&spec[a].norm()));
    idx.truncate(k);
    idx
}

/// Inverse FFT of the spectrum of `x` restricted to its `k` strongest bins.
pub fn periodic_sample(x: &[f64], k: usize) -> Result<Vec<f64>> {
    let bins = spectral::rfft_bins(x.len());
    if x.is_empty() || k < 1 || k > bins {
        return Err(Error::FrequencyCount { k, bins });
    }
    let spec = spectral::rfft(x);
    let mut kept = vec![Complex64::new(0.0, 0.0); bins];
    for f in top_k_bins(&spec, k) {
        kept[f] = spec[f];
    }
    Ok(spectral::irfft(&kept, x.len()))
}

/// Centred moving average of width `2t + 1`, replicate-padded at both ends.
pub fn trend_sample(x: &[f64], t: usize) -> Result<Vec<f64>> {
    let n = x.len();
    let window = 2 * t + 1;
    if window > n {
        return Err(Error::WindowSize { window, len: n });
    }
    if t == 0 {
        return Ok(x.to_vec());
    }
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    let t = t as isize;
    let mut sum: f64 = (-t..=t).map(at).sum();
    let mut out = Vec::with_capacity(n);
    out.push(sum / window as f64);
    for i in 1..n as isize {
        sum += at(i + t) - at(i - 1 - t);
        out.push(sum / window as f64);
    }
    Ok(out)
}

fn draw_pair<R: Rng + ?Sized>(lo: usize, hi: usize, distinct: bool, rng: &mut R) -> (usize, usize) {
    let a = rng.random_range(lo..=hi);
    let mut b = rng.random_range(lo..=hi);
    while distinct && lo < hi && b == a {
        b = rng.random_range(lo..=hi);
    }
    (a, b)
}

/// Applies a 1-D transform to every channel of a time-major `[L × C]` window.
fn per_channel(
    x: &[f64],
    channels: usize,
    f: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if channels == 1 {
        return f(x);
    }
    let len = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    let mut col = vec![0.0; len];
    for c in 0..channels {
        for t in 0..len {
            col[t] = x[t * channels + c];
        }
        for (t, v) in f(&col)?.into_iter().enumerate() {
            out[t * channels + c] = v;
        }
    }
    Ok(out)
}

/// Builds a positive pair from a single-variable window.
pub fn make_view_pair<R: Rng + ?Sized>(
    x: &[f64],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewPair> {
    make_view_pair_channels(x, 1, cfg, rng)
}

/// Builds a positive pair from a time-major `[L × channels]` window; the same
/// draws are used for every channel.
pub fn make_view_pair_channels<R: Rng + ?Sized>(
    x: &[f64],
    channels: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewPair> {
    if channels == 0 || x.len() % channels != 0 {
        return Err(Error::Shape(format!(
            "window of {} values is not a multiple of {channels} channels",
            x.len()
        )));
    }
    let len = x.len() / channels;
    match cfg.mode {
        AugmentMode::Clear => {
            cfg.validate(len)?;
            let (k_q, k_k) = draw_pair(cfg.k1, cfg.k2, cfg.strict_distinct, rng);
            let (t_q, t_k) = draw_pair(cfg.t1, cfg.t2, cfg.strict_distinct, rng);
            let view = |k: usize, t: usize| -> Result<View> {
                Ok(View {
                    periodic: per_channel(x, channels, |c| periodic_sample(c, k))?,
                    trend: per_channel(x, channels, |c| trend_sample(c, t))?,
                })
            };
            Ok(ViewPair {
                query: view(k_q, t_q)?,
                key: view(k_k, t_k)?,
                k_q,
                k_k,
                t_q,
                t_k,
            })
        }
        AugmentMode::CommonTrans => {
            let mut view = || {
                let v = common_transform(x, rng);
                View {
                    periodic: v.clone(),
                    trend: v,
                }
            };
            let query = view();
            let key = view();
            Ok(ViewPair {
                query,
                key,
                k_q: 0,
                k_k: 0,
                t_q: 0,
                t_k: 0,
            })
        }
    }
}

pub const COMMON_SCALE_STD: f64 = 0.5;
pub const COMMON_SHIFT_STD: f64 = 0.5;
pub const COMMON_JITTER_STD: f64 = 0.3;

/// `s·x + m + ε` with `s ~ N(1, 0.5²)` clipped to `[0.1, 2]`,
/// `m ~ N(0, 0.5²)` and elementwise `ε ~ N(0, 0.3²)`.
pub fn common_transform<R: Rng + ?Sized>(x: &[f64], rng: &mut R) -> Vec<f64> {
    let scale = Normal::new(1.0, COMMON_SCALE_STD).expect("valid std");
    let shift = Normal::new(0.0, COMMON_SHIFT_STD).expect("valid std");
    let jitter = Normal::new(0.0, COMMON_JITTER_STD).expect("valid std");
    let s = scale.sample(rng).clamp(0.1, 2.0);
    let m = shift.sample(rng);
    let eps: Vec<f64> = (0..x.len()).map(|_| jitter.sample(rng)).collect();
    common_transform_with(x, s, m, &eps)
}

/// Deterministic core of [`common_transform`].
pub fn common_transform_with(x: &[f64], scale: f64, shift: f64, jitter: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(jitter)
        .map(|(v, e)| scale * v + shift + e)
        .collect()
}
