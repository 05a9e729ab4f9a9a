//! Command-line driver.
//!
//! Configuration is a flat `section.key=value` file. Values resolve in the
//! order defaults, config file, `--set` overrides, dedicated flags. Every
//! command writes the resolved configuration into `<out>` (`config.resolved`
//! for train/synth/ablate, `eval.config.resolved`, `encode.config.resolved`); its
//! hash (first 16 hex digits of SHA-256) is stamped on every output record.
//! Errors print as one JSON line on stderr, `{"error": kind, "message": ..}`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentConfig, AugmentMode};
use crate::backbone::{BackboneConfig, BackboneParams, Branch, Checkpoint, Timesteps, TrendPool};
use crate::contrastive::{self, LossReduction, MocoConfig, TrainSpec};
use crate::data::{self, ChannelMode, SeriesDataset, SplitName, SplitSpec};
use crate::forecast::{self, EvalConfig, ForecastReport, ALPHA_GRID};
use crate::synthetic::{self, PeriodMode, PeriodSpec, SynthSpec, TrendSpec};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Csv,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Months for ETT-named files, ratios otherwise.
    Auto,
    Months,
    Ratios,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub timestamp_column: String,
    pub split: SplitKind,
    /// Train / val / test as month counts or fractions.
    pub parts: [f64; 3],
    pub steps_per_month: Option<usize>,
    pub lookback: usize,
    pub target: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Csv,
            path: None,
            timestamp_column: "date".into(),
            split: SplitKind::Auto,
            parts: [f64::NAN; 3],
            steps_per_month: None,
            lookback: 336,
            target: None,
        }
    }
}

/// Table-style ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub common_trans: bool,
    pub channel_mix: bool,
    pub drop_trend: bool,
    pub drop_periodicity: bool,
    pub origin_data: bool,
    pub linear_head: bool,
}

pub const VARIANTS: [&str; 6] = [
    "common_trans",
    "channel_mix",
    "no_trend",
    "no_periodicity",
    "origin_data",
    "linear_head",
];

impl Ablation {
    /// Turns on the flag behind an ablation variant name.
    pub fn apply_variant(&mut self, variant: &str) -> Result<()> {
        match variant {
            "common_trans" => self.common_trans = true,
            "channel_mix" => self.channel_mix = true,
            "no_trend" => self.drop_trend = true,
            "no_periodicity" => self.drop_periodicity = true,
            "origin_data" => self.origin_data = true,
            "linear_head" => self.linear_head = true,
            other => {
                return Err(Error::Usage(format!(
                    "unknown ablation variant `{other}`; expected one of {}",
                    VARIANTS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// `default`, or the active variant names joined with `+`.
    pub fn name(&self) -> String {
        let on = [
            self.common_trans,
            self.channel_mix,
            self.drop_trend,
            self.drop_periodicity,
            self.origin_data,
            self.linear_head,
        ];
        let names: Vec<&str> = VARIANTS
            .iter()
            .zip(on)
            .filter_map(|(n, b)| b.then_some(*n))
            .collect();
        if names.is_empty() {
            "default".into()
        } else {
            names.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub spec: SynthSpec,
    pub lookback: usize,
    pub epochs: usize,
    pub stride: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            spec: SynthSpec::default(),
            lookback: 128,
            epochs: 20,
            stride: 1,
        }
    }
}

/// Everything a command needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    pub moco: MocoConfig,
    pub horizons: Vec<usize>,
    pub alpha_grid: Vec<f64>,
    pub ablation: Ablation,
    pub synth: SynthConfig,
    pub seed: u64,
    pub seeds: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            backbone: BackboneConfig::default(),
            moco: MocoConfig::default(),
            horizons: vec![24, 48, 168, 336, 720],
            alpha_grid: ALPHA_GRID.to_vec(),
            ablation: Ablation::default(),
            synth: SynthConfig::default(),
            seed: 0,
            seeds: 1,
            out: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key}={value}: expected {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn opt_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "none" | "auto" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn triples(key: &str, value: &str) -> Result<Vec<[f64; 3]>> {
    value
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|t| {
            let v: Vec<f64> = t.split(':').map(|x| num(key, x)).collect::<Result<_>>()?;
            v.try_into().map_err(|_| bad(key, value, "a;b;c triples of the form x:y:z"))
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl RunConfig {
    /// Applies one `section.key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data.source" => {
                self.data.source = match v {
                    "csv" => DataSource::Csv,
                    "synthetic" => DataSource::Synthetic,
                    _ => return Err(bad(key, v, "csv or synthetic")),
                }
            }
            "data.path" => self.data.path = Some(PathBuf::from(v)),
            "data.timestamp_column" => self.data.timestamp_column = v.into(),
            "data.split" => {
                self.data.split = match v {
                    "auto" => SplitKind::Auto,
                    "months" => SplitKind::Months,
                    "ratios" => SplitKind::Ratios,
                    _ => return Err(bad(key, v, "auto, months or ratios")),
                }
            }
            "data.train" => self.data.parts[0] = num(key, v)?,
            "data.val" => self.data.parts[1] = num(key, v)?,
            "data.test" => self.data.parts[2] = num(key, v)?,
            "data.steps_per_month" => self.data.steps_per_month = opt_num(key, v)?,
            "data.lookback" => self.data.lookback = num(key, v)?,
            "data.target" => {
                self.data.target = match v {
                    "" | "none" => None,
                    name => Some(name.into()),
                }
            }
            "augment.k1" => self.augment.k1 = num(key, v)?,
            "augment.k2" => self.augment.k2 = num(key, v)?,
            "augment.t1" => self.augment.t1 = num(key, v)?,
            "augment.t2" => self.augment.t2 = num(key, v)?,
            "augment.strict_distinct" => self.augment.strict_distinct = flag(key, v)?,
            "backbone.d_model" => self.backbone.d_model = num(key, v)?,
            "backbone.d_rep" => self.backbone.d_rep = num(key, v)?,
            "backbone.kernel_sizes" => self.backbone.kernel_sizes = list(key, v)?,
            "backbone.trend_pool" => {
                self.backbone.trend_pool = match v {
                    "branches" => TrendPool::Branches,
                    "time" => TrendPool::Time,
                    _ => return Err(bad(key, v, "branches or time")),
                }
            }
            "moco.batch_size" => self.moco.batch_size = num(key, v)?,
            "moco.queue_size" => self.moco.queue_size = opt_num(key, v)?,
            "moco.momentum" => self.moco.momentum = num(key, v)?,
            "moco.tau" => self.moco.tau = num(key, v)?,
            "moco.lr" => self.moco.lr = num(key, v)?,
            "moco.sgd_momentum" => self.moco.sgd_momentum = num(key, v)?,
            "moco.epochs" => self.moco.epochs = num(key, v)?,
            "moco.max_steps" => self.moco.max_steps = opt_num(key, v)?,
            "moco.loss_reduction" => {
                self.moco.loss_reduction = match v {
                    "sum" => LossReduction::Sum,
                    "mean" => LossReduction::Mean,
                    _ => return Err(bad(key, v, "sum or mean")),
                }
            }
            "moco.contrast_timesteps" => {
                self.moco.contrast_timesteps = match v {
                    "last" => Timesteps::Last,
                    "all" => Timesteps::All,
                    _ => return Err(bad(key, v, "last or all")),
                }
            }
            "eval.horizons" => self.horizons = list(key, v)?,
            "eval.alpha_grid" => self.alpha_grid = list(key, v)?,
            "ablation.common_trans" => self.ablation.common_trans = flag(key, v)?,
            "ablation.channel_mix" => self.ablation.channel_mix = flag(key, v)?,
            "ablation.drop_trend" => self.ablation.drop_trend = flag(key, v)?,
            "ablation.drop_periodicity" => self.ablation.drop_periodicity = flag(key, v)?,
            "ablation.origin_data" => self.ablation.origin_data = flag(key, v)?,
            "ablation.linear_head" => self.ablation.linear_head = flag(key, v)?,
            "synth.length" => self.synth.spec.length = num(key, v)?,
            "synth.noise_std" => self.synth.spec.noise_std = num(key, v)?,
            "synth.period_mode" => {
                self.synth.spec.period_mode = match v {
                    "period" => PeriodMode::Period,
                    "frequency" => PeriodMode::Frequency,
                    _ => return Err(bad(key, v, "period or frequency")),
                }
            }
            "synth.trends" => {
                self.synth.spec.trends = triples(key, v)?
                    .into_iter()
                    .map(|[b0, b1, b2]| TrendSpec { b0, b1, b2 })
                    .collect()
            }
            "synth.periods" => {
                self.synth.spec.periods = triples(key, v)?
                    .into_iter()
                    .map(|[value, phase, amplitude]| PeriodSpec {
                        value,
                        phase,
                        amplitude,
                    })
                    .collect()
            }
            "synth.lookback" => self.synth.lookback = num(key, v)?,
            "synth.epochs" => self.synth.epochs = num(key, v)?,
            "synth.stride" => self.synth.stride = num(key, v)?,
            "run.seed" => self.seed = num(key, v)?,
            "run.seeds" => self.seeds = num(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: origin.to_path_buf(),
                message: format!("line {}: expected key=value", i + 1),
            })?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}:{}: {m}", origin.display(), i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// All keys with their resolved values, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let synth_trends = self
            .synth
            .spec
            .trends
            .iter()
            .map(|t| format!("{}:{}:{}", t.b0, t.b1, t.b2))
            .collect::<Vec<_>>()
            .join(";");
        let synth_periods = self
            .synth
            .spec
            .periods
            .iter()
            .map(|p| format!("{}:{}:{}", p.value, p.phase, p.amplitude))
            .collect::<Vec<_>>()
            .join(";");
        let split = self.split_spec().map(|s| format!("{s:?}")).unwrap_or_else(|e| e.to_string());
        let mut e: Vec<(&str, String)> = vec![
            ("data.source", format!("{:?}", d.source).to_lowercase()),
            ("data.path", d.path.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("data.timestamp_column", d.timestamp_column.clone()),
            ("data.split", split),
            ("data.lookback", d.lookback.to_string()),
            ("data.target", d.target.clone().unwrap_or_else(|| "none".into())),
            ("augment.k1", self.augment.k1.to_string()),
            ("augment.k2", self.augment.k2.to_string()),
            ("augment.t1", self.augment.t1.to_string()),
            ("augment.t2", self.augment.t2.to_string()),
            ("augment.strict_distinct", self.augment.strict_distinct.to_string()),
            ("backbone.d_model", self.backbone.d_model.to_string()),
            ("backbone.d_rep", self.backbone.d_rep.to_string()),
            ("backbone.kernel_sizes", join(&self.backbone.kernel_sizes)),
            ("backbone.trend_pool", format!("{:?}", self.backbone.trend_pool).to_lowercase()),
            ("moco.batch_size", self.moco.batch_size.to_string()),
            ("moco.queue_size", self.moco.queue_len().to_string()),
            ("moco.momentum", self.moco.momentum.to_string()),
            ("moco.tau", self.moco.tau.to_string()),
            ("moco.lr", self.moco.lr.to_string()),
            ("moco.sgd_momentum", self.moco.sgd_momentum.to_string()),
            ("moco.epochs", self.moco.epochs.to_string()),
            ("moco.max_steps", opt(&self.moco.max_steps)),
            ("moco.loss_reduction", format!("{:?}", self.moco.loss_reduction).to_lowercase()),
            ("moco.contrast_timesteps", format!("{:?}", self.moco.contrast_timesteps).to_lowercase()),
            ("eval.horizons", join(&self.horizons)),
            ("eval.alpha_grid", join(&self.alpha_grid)),
            ("ablation.common_trans", self.ablation.common_trans.to_string()),
            ("ablation.channel_mix", self.ablation.channel_mix.to_string()),
            ("ablation.drop_trend", self.ablation.drop_trend.to_string()),
            ("ablation.drop_periodicity", self.ablation.drop_periodicity.to_string()),
            ("ablation.origin_data", self.ablation.origin_data.to_string()),
            ("ablation.linear_head", self.ablation.linear_head.to_string()),
            ("synth.length", self.synth.spec.length.to_string()),
            ("synth.noise_std", self.synth.spec.noise_std.to_string()),
            ("synth.period_mode", format!("{:?}", self.synth.spec.period_mode).to_lowercase()),
            ("synth.trends", synth_trends),
            ("synth.periods", synth_periods),
            ("synth.lookback", self.synth.lookback.to_string()),
            ("synth.epochs", self.synth.epochs.to_string()),
            ("synth.stride", self.synth.stride.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.seeds", self.seeds.to_string()),
        ];
        e.sort_by(|a, b| a.0.cmp(b.0));
        e.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Canonical `key=value` text; the output directory is not part of it.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot().as_bytes()))[..16].to_string()
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let d = &self.data;
        let is_ett = d
            .path
            .as_ref()
            .and_then(|p| p.file_name())
            .is_some_and(|n| n.to_string_lossy().starts_with("ETT"));
        let kind = match d.split {
            SplitKind::Auto if is_ett && d.source == DataSource::Csv => SplitKind::Months,
            SplitKind::Auto => SplitKind::Ratios,
            k => k,
        };
        let p = d.parts;
        let given = |dflt: [f64; 3]| if p.iter().any(|v| v.is_nan()) { dflt } else { p };
        Ok(match kind {
            SplitKind::Months => {
                let [a, b, c] = given([12.0, 4.0, 4.0]);
                let whole = |x: f64| {
                    (x >= 0.0 && x.fract() == 0.0)
                        .then_some(x as usize)
                        .ok_or_else(|| Error::Config(format!("month count {x} is not a whole number")))
                };
                SplitSpec::Months {
                    train: whole(a)?,
                    val: whole(b)?,
                    test: whole(c)?,
                    steps_per_month: d.steps_per_month,
                }
            }
            _ => {
                let [a, b, c] = given([0.6, 0.2, 0.2]);
                SplitSpec::Ratios {
                    train: a,
                    val: b,
                    test: c,
                }
            }
        })
    }

    /// Checks cross-field constraints and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Csv {
            if let Some(p) = &self.data.path {
                if !p.is_file() {
                    return Err(Error::Config(format!("data.path `{}` does not exist", p.display())));
                }
            }
        }
        if self.ablation.drop_trend && self.ablation.drop_periodicity {
            return Err(Error::Config(
                "cannot drop both the trend and the periodicity branch".into(),
            ));
        }
        if self.seeds == 0 {
            return Err(Error::Config("run.seeds must be at least 1".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("eval.horizons must be positive".into()));
        }
        self.moco.validate()?;
        self.split_spec()?;
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn channel_mode(&self) -> ChannelMode {
        if self.ablation.channel_mix {
            ChannelMode::Mix
        } else {
            ChannelMode::Independent
        }
    }

    /// Loads the configured dataset.
    pub fn dataset(&self) -> Result<SeriesDataset> {
        let split = self.split_spec()?;
        match self.data.source {
            DataSource::Csv => {
                let path = self
                    .data
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.path is required for csv data".into()))?;
                data::ingest_csv(path, &self.data.timestamp_column, &split)
            }
            DataSource::Synthetic => {
                let series = synthetic::generate(&self.synth.spec, seed::child(self.seed, "synthetic"))?;
                let splits = split.resolve(self.synth.spec.length, None)?;
                synthetic::to_dataset_split(&series, splits)
            }
        }
    }

    /// Training setup for `ds`, with ablation switches applied.
    pub fn train_spec(&self, ds: &SeriesDataset) -> Result<TrainSpec> {
        let mut backbone = BackboneConfig {
            input_len: self.data.lookback,
            in_channels: match self.channel_mode() {
                ChannelMode::Independent => 1,
                ChannelMode::Mix => ds.channels(),
            },
            drop: None,
            ..self.backbone.clone()
        };
        if self.ablation.drop_trend {
            backbone = backbone.ablate(Branch::Trend)?;
        }
        if self.ablation.drop_periodicity {
            backbone = backbone.ablate(Branch::Periodicity)?;
        }
        let augment = AugmentConfig {
            mode: if self.ablation.common_trans {
                AugmentMode::CommonTrans
            } else {
                AugmentMode::Clear
            },
            ..self.augment.clone()
        };
        Ok(TrainSpec {
            backbone,
            augment,
            moco: self.moco.clone(),
            channel_mode: self.channel_mode(),
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            horizons: self.horizons.clone(),
            channel_mode: self.channel_mode(),
            target_variable: self.data.target.clone(),
            alpha_grid: self.alpha_grid.clone(),
            origin_data: self.ablation.origin_data,
            linear_head: self.ablation.linear_head,
        }
    }

    /// Training setup for the synthetic case study.
    pub fn synth_train_spec(&self) -> TrainSpec {
        TrainSpec {
            backbone: BackboneConfig {
                input_len: self.synth.lookback,
                in_channels: 1,
                drop: None,
                ..self.backbone.clone()
            },
            augment: self.augment.clone(),
            moco: MocoConfig {
                epochs: self.synth.epochs,
                ..self.moco.clone()
            },
            channel_mode: ChannelMode::Independent,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tsrep", version, about = "Contrastive time-series representations and forecasting")]
pub struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds starting at the master seed.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Training epochs (also used by `synth`).
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Forecast horizons, comma-separated or repeated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub horizon: Vec<usize>,
    /// Extra `section.key=value` overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub common_trans: bool,
    #[arg(long, global = true)]
    pub channel_mix: bool,
    #[arg(long, global = true)]
    pub drop_trend: bool,
    #[arg(long, global = true)]
    pub drop_periodicity: bool,
    #[arg(long, global = true)]
    pub origin_data: bool,
    #[arg(long, global = true)]
    pub linear_head: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the encoder; writes checkpoint, loss trace and config snapshot.
    Train,
    /// Forecasting evaluation of trained checkpoints.
    Eval {
        /// Checkpoint to evaluate; defaults to the one `train` wrote in `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Synthetic case study: series, training, probe scores and PCA.
    Synth,
    /// Train and evaluate one ablation variant.
    Ablate { variant: String },
    /// Dump window representations of a split to CSV.
    Encode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

impl Cli {
    /// Resolves the run configuration from file, overrides and flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.moco.epochs = e;
            cfg.synth.epochs = e;
        }
        if !self.horizon.is_empty() {
            cfg.horizons = self.horizon.clone();
        }
        let a = &mut cfg.ablation;
        a.common_trans |= self.common_trans;
        a.channel_mix |= self.channel_mix;
        a.drop_trend |= self.drop_trend;
        a.drop_periodicity |= self.drop_periodicity;
        a.origin_data |= self.origin_data;
        a.linear_head |= self.linear_head;
        Ok(cfg)
    }
}

/// Files written by a command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub reports: Vec<ForecastReport>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn seed_dir(cfg: &RunConfig, base: &Path, s: u64) -> PathBuf {
    if cfg.seeds > 1 {
        base.join(format!("seed-{s}"))
    } else {
        base.to_path_buf()
    }
}

fn write_snapshot(cfg: &RunConfig, dir: &Path, name: &str, out: &mut Outcome) -> Result<String> {
    create_dir(dir)?;
    let path = dir.join(name);
    let fp = cfg.fingerprint();
    let text = format!("# fingerprint={fp}\n{}", cfg.snapshot());
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    out.files.push(path);
    Ok(fp)
}

fn train_one(
    cfg: &RunConfig,
    ds: &SeriesDataset,
    s: u64,
    dir: &Path,
    fp: &str,
    out: &mut Outcome,
) -> Result<Checkpoint> {
    create_dir(dir)?;
    let spec = cfg.train_spec(ds)?;
    let result = contrastive::train(ds, &spec, s, |r| {
        if r.step == 1 || r.step % 50 == 0 {
            println!("seed {s} step {} epoch {} loss {:.6}", r.step, r.epoch, r.loss);
        }
    })?;
    let mut ck = result.checkpoint;
    ck.fingerprint = Some(fp.to_string());
    let ck_path = dir.join("checkpoint.json");
    ck.save(&ck_path)?;
    let trace_path = dir.join("loss.csv");
    contrastive::write_trace_csv(&trace_path, &result.trace, Some(fp))?;
    out.files.extend([ck_path, trace_path]);
    Ok(ck)
}

/// Checkpoint whose parameters are never read, for the raw-window head.
fn bypass_checkpoint(cfg: &RunConfig, ds: &SeriesDataset, s: u64) -> Result<Checkpoint> {
    let spec = cfg.train_spec(ds)?;
    let params = BackboneParams::init(&spec.backbone, &mut seed::rng(s, "init"))?;
    Ok(Checkpoint::new(spec.backbone, s, 0, params.clone(), params))
}

fn check_compatible(ck: &Checkpoint, cfg: &RunConfig, ds: &SeriesDataset) -> Result<()> {
    let want = cfg.train_spec(ds)?.backbone;
    if ck.config != want {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint backbone {:?} differs from configured {:?}",
            ck.config, want
        )));
    }
    Ok(())
}

fn write_reports(dir: &Path, reports: Vec<ForecastReport>, cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let mut all = reports;
    if cfg.seeds > 1 {
        let mean = forecast::mean_rows(&all);
        all.extend(mean);
    }
    let (csv, jsonl) = (dir.join("report.csv"), dir.join("report.jsonl"));
    forecast::write_reports(&csv, &jsonl, &all)?;
    for r in &all {
        println!(
            "{} {} h={} seed={} mse={:.6} mae={:.6} alpha={}",
            r.variant,
            r.protocol.as_str(),
            r.horizon,
            r.seed.map_or("mean".into(), |s| s.to_string()),
            r.mse,
            r.mae,
            r.alpha_selected
        );
    }
    out.files.extend([csv, jsonl]);
    out.reports = all;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let fp = write_snapshot(cfg, &cfg.out, "config.resolved", &mut out)?;
    let ds = cfg.dataset()?;
    for s in cfg.seed_list() {
        train_one(cfg, &ds, s, &seed_dir(cfg, &cfg.out, s), &fp, &mut out)?;
    }
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Outcome> {
    if checkpoint.is_some() && cfg.seeds > 1 {
        return Err(Error::Usage("--checkpoint evaluates one seed; drop --seeds".into()));
    }
    let mut out = Outcome::default();
    let fp = write_snapshot(cfg, &cfg.out, "eval.config.resolved", &mut out)?;
    let ds = cfg.dataset()?;
    let eval = cfg.eval_config();
    let variant = cfg.ablation.name();
    let mut reports = Vec::new();
    for s in cfg.seed_list() {
        let ck = if cfg.ablation.origin_data {
            bypass_checkpoint(cfg, &ds, s)?
        } else {
            let path = checkpoint.map_or_else(|| seed_dir(cfg, &cfg.out, s).join("checkpoint.json"), Path::to_path_buf);
            Checkpoint::load(&path)?
        };
        check_compatible(&ck, cfg, &ds)?;
        reports.extend(forecast::evaluate(&ck, &ds, &eval, s, &variant, &fp)?);
    }
    write_reports(&cfg.out, reports, cfg, &mut out)?;
    Ok(out)
}

fn cmd_ablate(cfg: &RunConfig, variant: &str) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    cfg.ablation.apply_variant(variant)?;
    cfg.validate()?;
    cfg.out = cfg.out.join(format!("ablate-{variant}"));
    let mut out = Outcome::default();
    let fp = write_snapshot(&cfg, &cfg.out, "config.resolved", &mut out)?;
    let ds = cfg.dataset()?;
    let eval = cfg.eval_config();
    let name = cfg.ablation.name();
    let mut reports = Vec::new();
    for s in cfg.seed_list() {
        let ck = if cfg.ablation.origin_data {
            bypass_checkpoint(&cfg, &ds, s)?
        } else {
            train_one(&cfg, &ds, s, &seed_dir(&cfg, &cfg.out, s), &fp, &mut out)?
        };
        reports.extend(forecast::evaluate(&ck, &ds, &eval, s, &name, &fp)?);
    }
    write_reports(&cfg.out, reports, &cfg, &mut out)?;
    Ok(out)
}

fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let fp = write_snapshot(cfg, &cfg.out, "config.resolved", &mut out)?;
    let spec = cfg.synth_train_spec();
    for s in cfg.seed_list() {
        let dir = seed_dir(cfg, &cfg.out, s);
        create_dir(&dir)?;
        let series = synthetic::generate(&cfg.synth.spec, seed::child(s, "synthetic"))?;
        let series_path = dir.join("series.csv");
        synthetic::write_series_csv(&series_path, &series, Some(&fp))?;
        let study = synthetic::case_study(&cfg.synth.spec, &spec, s, cfg.synth.stride)?;
        let pca_path = dir.join("pca.csv");
        synthetic::write_pca_csv(&pca_path, &study.labels, &study.pca, Some(&fp))?;
        let trace_path = dir.join("loss.csv");
        contrastive::write_trace_csv(&trace_path, &study.trace, Some(&fp))?;
        let mut ck = study.checkpoint;
        ck.fingerprint = Some(fp.clone());
        let ck_path = dir.join("checkpoint.json");
        ck.save(&ck_path)?;
        let report = serde_json::json!({
            "seed": s,
            "series": series.len(),
            "probe": study.report,
            "fingerprint": fp,
        });
        let probe_path = dir.join("probe.json");
        std::fs::write(&probe_path, format!("{report}\n")).map_err(|e| Error::io(&probe_path, e))?;
        let r = &study.report;
        println!(
            "seed {s}: {} series, trend_score {:.4}, period_score {:.4} (raw {:.4} / {:.4}, shuffled {:.4} / {:.4})",
            series.len(),
            r.representation.trend_score,
            r.representation.period_score,
            r.raw.trend_score,
            r.raw.period_score,
            r.shuffled.trend_score,
            r.shuffled.period_score
        );
        out.files.extend([series_path, pca_path, trace_path, ck_path, probe_path]);
    }
    Ok(out)
}

fn cmd_encode(cfg: &RunConfig, checkpoint: Option<&Path>, split: &str) -> Result<Outcome> {
    let split: SplitName = split.parse().map_err(|_| Error::Usage(format!("unknown split `{split}`")))?;
    let mut out = Outcome::default();
    let fp = write_snapshot(cfg, &cfg.out, "encode.config.resolved", &mut out)?;
    let ds = cfg.dataset()?;
    let path = checkpoint.map_or_else(|| cfg.out.join("checkpoint.json"), Path::to_path_buf);
    let ck = Checkpoint::load(&path)?;
    check_compatible(&ck, cfg, &ds)?;
    let lookback = ck.config.input_len;
    let positions = data::eval_positions(&ds, split, lookback, 0, cfg.channel_mode())?;
    let windows: Vec<Vec<f64>> = positions.iter().map(|&p| ds.window(p, lookback).values).collect();
    let refs: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
    let reps = crate::backbone::encode_windows(&ck.online, &ck.config, &refs)?;
    let mut s = String::from("variable,start,end");
    for i in 0..ck.config.d_rep {
        let _ = write!(s, ",r{i}");
    }
    s.push_str(",fingerprint\n");
    for (p, r) in positions.iter().zip(&reps) {
        let var = p.variable.map_or_else(|| "all".to_string(), |c| ds.variable_names[c].clone());
        let _ = write!(s, "{var},{},{}", p.start, p.start + lookback - 1);
        for v in r {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{fp}");
    }
    let csv = cfg.out.join(format!("representations-{}.csv", split.as_str()));
    std::fs::write(&csv, s).map_err(|e| Error::io(&csv, e))?;
    println!("wrote {} representations to {}", reps.len(), csv.display());
    out.files.push(csv);
    Ok(out)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string().trim().replace('\n', " ")))?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let cfg = cli.resolve()?;
    if !matches!(cli.command, Command::Ablate { .. }) {
        cfg.validate()?;
    }
    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref()),
        Command::Synth => cmd_synth(&cfg),
        Command::Ablate { variant } => cmd_ablate(&cfg, variant),
        Command::Encode { checkpoint, split } => cmd_encode(&cfg, checkpoint.as_deref(), split),
    }
}

/// The single-line error record printed on stderr.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

/// Process entry point; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = Error::Usage(e.to_string().trim().replace('\n', " "));
            eprintln!("{}", error_line(&err));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}
