//! Decomposition-aware contrastive representation learning for time series.
//!
//! The pipeline turns each training window into two augmented views, each a
//! (periodic, trend) pair built from a top-k Fourier reconstruction and a
//! moving average. A dual encoder (causal multi-kernel convolutions for the
//! trend, a frequency-domain complex linear layer for the periodic part) maps
//! a view to a global representation, trained with a momentum encoder and a
//! negative queue under InfoNCE. Downstream, a ridge head maps frozen
//! representations to future values.
//!
//! Module map:
//! - [`data`]: CSV ingest, z-scoring, splits and window sampling.
//! - [`augment`]: positive-pair generation and the scale/shift/jitter baseline.
//! - [`autodiff`]: a small reverse-mode engine over real and complex tensors.
//! - [`backbone`]: the representation function and its parameters.
//! - [`contrastive`]: InfoNCE, momentum update, negative queue, training loop.
//! - [`forecast`]: ridge / linear heads and the forecasting evaluation.
//! - [`synthetic`]: the two-trend by three-periodicity case-study data and a
//!   separability probe.
//! - [`cli`]: configuration, seeding and the command implementations.

pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod contrastive;
pub mod data;
mod error;
pub mod forecast;
pub mod seed;
pub mod spectral;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
