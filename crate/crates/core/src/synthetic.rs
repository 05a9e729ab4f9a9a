//! Synthetic trend × periodicity series and a separability probe.
//!
//! Each series is `g_i(t) + p_j(t)` with a linear trend
//! `g(t) = b0 - b1 * t / b2 + eps_t` and a sinusoid `p(t)`. The probe scores
//! how well representations group by trend and by periodicity using
//! leave-one-out nearest-centroid accuracy, and exports 2-D PCA coordinates.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone;
use crate::contrastive::{self, TrainSpec};
use crate::data::{SeriesDataset, Splits};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodSpec {
    /// Period in steps, or angular frequency in radians per step, depending
    /// on [`PeriodMode`].
    pub value: f64,
    pub phase: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodMode {
    /// `amplitude * sin(2π t / value + phase)`
    #[default]
    Period,
    /// `amplitude * sin(value * t + phase)`
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub trends: Vec<TrendSpec>,
    pub periods: Vec<PeriodSpec>,
    pub length: usize,
    pub noise_std: f64,
    pub period_mode: PeriodMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let t = |b0, b1, b2| TrendSpec { b0, b1, b2 };
        let p = |value, phase, amplitude| PeriodSpec {
            value,
            phase,
            amplitude,
        };
        SynthSpec {
            trends: vec![t(2.0, 1.5, 500.0), t(-2.0, -1.5, 500.0)],
            periods: vec![p(20.0, 0.0, 3.0), p(50.0, 0.5, 3.0), p(100.0, 1.0, 3.0)],
            length: 1000,
            noise_std: 0.3,
            period_mode: PeriodMode::Period,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || !(self.noise_std >= 0.0) {
            return Err(Error::Config("need length >= 1 and noise_std >= 0".into()));
        }
        if self.trends.is_empty() || self.periods.is_empty() {
            return Err(Error::Config("need at least one trend and one period".into()));
        }
        if self.trends.iter().any(|t| t.b2 == 0.0) {
            return Err(Error::Config("trend b2 must be nonzero".into()));
        }
        if self.period_mode == PeriodMode::Period && self.periods.iter().any(|p| p.value == 0.0) {
            return Err(Error::Config("period must be nonzero".into()));
        }
        Ok(())
    }

    pub fn periodic_value(&self, j: usize, t: usize) -> f64 {
        let p = self.periods[j];
        let angle = match self.period_mode {
            PeriodMode::Period => 2.0 * PI * t as f64 / p.value,
            PeriodMode::Frequency => p.value * t as f64,
        };
        p.amplitude * (angle + p.phase).sin()
    }

    pub fn trend_value(&self, i: usize, t: usize) -> f64 {
        let g = self.trends[i];
        g.b0 - g.b1 * t as f64 / g.b2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub trend: usize,
    pub period: usize,
    pub values: Vec<f64>,
}

impl LabeledSeries {
    pub fn name(&self) -> String {
        format!("trend{}_period{}", self.trend, self.period)
    }
}

/// One series per `(trend, period)` pair, trend-major. Noise is drawn
/// independently for every series.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Vec<LabeledSeries>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.trends.len() * spec.periods.len());
    for i in 0..spec.trends.len() {
        for j in 0..spec.periods.len() {
            let values = (0..spec.length)
                .map(|t| spec.trend_value(i, t) + spec.periodic_value(j, t) + noise.sample(&mut rng))
                .collect();
            out.push(LabeledSeries {
                trend: i,
                period: j,
                values,
            });
        }
    }
    Ok(out)
}

/// Packs the series as variables of one dataset, all of it train.
pub fn to_dataset(series: &[LabeledSeries]) -> Result<SeriesDataset> {
    let len = series.first().map_or(0, |s| s.values.len());
    to_dataset_split(
        series,
        Splits {
            train: 0..len,
            val: len..len,
            test: len..len,
        },
    )
}

/// Packs the series as variables of one dataset with the given split.
pub fn to_dataset_split(series: &[LabeledSeries], split: Splits) -> Result<SeriesDataset> {
    let len = series.first().map_or(0, |s| s.values.len());
    if series.iter().any(|s| s.values.len() != len) {
        return Err(Error::Shape("synthetic series differ in length".into()));
    }
    let c = series.len();
    let mut values = vec![0.0; len * c];
    for (ci, s) in series.iter().enumerate() {
        for (t, &v) in s.values.iter().enumerate() {
            values[t * c + ci] = v;
        }
    }
    SeriesDataset::from_raw(
        "synthetic",
        series.iter().map(LabeledSeries::name).collect(),
        values,
        split,
    )
}

/// Writes `t` plus one column per series.
/// Wide CSV, one column per series; `fingerprint` adds a trailing column.
pub fn write_series_csv(
    path: impl AsRef<Path>,
    series: &[LabeledSeries],
    fingerprint: Option<&str>,
) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("t");
    for ser in series {
        let _ = write!(s, ",{}", ser.name());
    }
    if fingerprint.is_some() {
        s.push_str(",fingerprint");
    }
    s.push('\n');
    let len = series.first().map_or(0, |x| x.values.len());
    for t in 0..len {
        let _ = write!(s, "{t}");
        for ser in series {
            let _ = write!(s, ",{}", ser.values[t]);
        }
        if let Some(fp) = fingerprint {
            let _ = write!(s, ",{fp}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Leave-one-out nearest-centroid accuracy of `labels` given `points`.
///
/// A point is scored against its own class centroid computed without it and
/// the full centroids of the other classes; distance ties go to the lower
/// label. Singleton classes can never be predicted for their own member.
pub fn nearest_centroid_loo(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Probe(format!(
            "{} points for {} labels",
            points.len(),
            labels.len()
        )));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Probe("points differ in dimension".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    let mut sums = vec![vec![0.0; d]; classes];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Probe("need at least two distinct labels".into()));
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n.max(1) as f64).collect())
        .collect();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut correct = 0usize;
    let mut own = vec![0.0; d];
    for (p, &l) in points.iter().zip(labels) {
        let mut best = (f64::INFINITY, usize::MAX);
        for c in 0..classes {
            let dc = if c == l {
                if counts[c] < 2 {
                    continue;
                }
                let n = (counts[c] - 1) as f64;
                own.iter_mut()
                    .zip(&sums[c])
                    .zip(p)
                    .for_each(|((o, s), v)| *o = (s - v) / n);
                dist2(p, &own)
            } else if counts[c] > 0 {
                dist2(p, &centroids[c])
            } else {
                continue;
            };
            if dc < best.0 {
                best = (dc, c);
            }
        }
        if best.1 == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / points.len() as f64)
}

/// Mean probe accuracy over `shuffles` random label permutations.
pub fn shuffled_baseline<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    labels: &[usize],
    shuffles: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut perm = labels.to_vec();
    let mut total = 0.0;
    for _ in 0..shuffles {
        perm.shuffle(rng);
        total += nearest_centroid_loo(points, &perm)?;
    }
    Ok(total / shuffles.max(1) as f64)
}

/// Projection onto the top two principal components. Each component's sign
/// is fixed so its largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(Error::Probe("PCA needs at least one non-empty point".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n as f64);
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comps = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(v);
    }
    while comps.len() < 2 {
        comps.push(vec![0.0; d]);
    }
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let proj = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [proj(&comps[0]), proj(&comps[1])]
        })
        .collect())
}

/// Probe result for one set of labeled points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub trend_score: f64,
    pub period_score: f64,
}

pub fn separability_probe(points: &[Vec<f64>], trend: &[usize], period: &[usize]) -> Result<ProbeScores> {
    Ok(ProbeScores {
        trend_score: nearest_centroid_loo(points, trend)?,
        period_score: nearest_centroid_loo(points, period)?,
    })
}

/// Windows of every series, with their parent labels.
#[derive(Debug, Clone)]
pub struct LabeledWindows {
    pub windows: Vec<Vec<f64>>,
    pub trend: Vec<usize>,
    pub period: Vec<usize>,
    pub series: Vec<usize>,
    pub end: Vec<usize>,
}

/// Stride-`stride` windows of length `len` over the normalized dataset.
pub fn labeled_windows(
    ds: &SeriesDataset,
    series: &[LabeledSeries],
    len: usize,
    stride: usize,
) -> Result<LabeledWindows> {
    if len == 0 || len > ds.len || stride == 0 {
        return Err(Error::WindowTooLong {
            needed: len,
            available: ds.len,
        });
    }
    let mut out = LabeledWindows {
        windows: Vec::new(),
        trend: Vec::new(),
        period: Vec::new(),
        series: Vec::new(),
        end: Vec::new(),
    };
    for (c, s) in series.iter().enumerate() {
        for start in (0..=ds.len - len).step_by(stride) {
            out.windows.push(ds.column(c, start..start + len));
            out.trend.push(s.trend);
            out.period.push(s.period);
            out.series.push(c);
            out.end.push(start + len - 1);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub windows: usize,
    pub representation: ProbeScores,
    pub raw: ProbeScores,
    pub shuffled: ProbeScores,
    pub steps: usize,
    pub final_loss: f64,
}

/// Output of [`case_study`], including per-window PCA coordinates.
#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub report: CaseStudyReport,
    pub labels: LabeledWindows,
    pub pca: Vec<[f64; 2]>,
    pub checkpoint: backbone::Checkpoint,
    pub trace: Vec<contrastive::StepRecord>,
}

/// Number of label shuffles in the baseline.
pub const SHUFFLES: usize = 100;

/// Trains on the synthetic series and probes the window representations.
pub fn case_study(
    spec: &SynthSpec,
    train: &TrainSpec,
    master_seed: u64,
    stride: usize,
) -> Result<CaseStudy> {
    let series = generate(spec, crate::seed::child(master_seed, "synthetic"))?;
    let ds = to_dataset(&series)?;
    let out = contrastive::train(&ds, train, master_seed, |_| {})?;
    let cfg = &out.checkpoint.config;
    let labels = labeled_windows(&ds, &series, cfg.input_len, stride)?;
    let refs: Vec<&[f64]> = labels.windows.iter().map(Vec::as_slice).collect();
    let reps = backbone::encode_windows(&out.checkpoint.online, cfg, &refs)?;

    let representation = separability_probe(&reps, &labels.trend, &labels.period)?;
    let raw = separability_probe(&labels.windows, &labels.trend, &labels.period)?;
    let mut rng = crate::seed::rng(master_seed, "probe");
    let shuffled = ProbeScores {
        trend_score: shuffled_baseline(&reps, &labels.trend, SHUFFLES, &mut rng)?,
        period_score: shuffled_baseline(&reps, &labels.period, SHUFFLES, &mut rng)?,
    };
    let pca = pca_2d(&reps)?;
    Ok(CaseStudy {
        report: CaseStudyReport {
            windows: reps.len(),
            representation,
            raw,
            shuffled,
            steps: out.trace.len(),
            final_loss: out.trace.last().map_or(f64::NAN, |r| r.loss),
        },
        labels,
        pca,
        checkpoint: out.checkpoint,
        trace: out.trace,
    })
}

/// Writes `window,series,trend,period,end,pc1,pc2`.
pub fn write_pca_csv(
    path: impl AsRef<Path>,
    labels: &LabeledWindows,
    pca: &[[f64; 2]],
    fingerprint: Option<&str>,
) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("window,series,trend,period,end,pc1,pc2");
    s.push_str(if fingerprint.is_some() { ",fingerprint\n" } else { "\n" });
    for (i, xy) in pca.iter().enumerate() {
        let _ = write!(
            s,
            "{i},{},{},{},{},{},{}",
            labels.series[i], labels.trend[i], labels.period[i], labels.end[i], xy[0], xy[1]
        );
        match fingerprint {
            Some(fp) => {
                let _ = writeln!(s, ",{fp}");
            }
            None => s.push('\n'),
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
