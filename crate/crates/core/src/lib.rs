//! Forecasting engine built around a token-level recalibration adapter.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! * [`params`]: named parameter storage and seeded initialisation.
//! * [`adapter`]: the perceive/route/modulate layer.
//! * [`backbone`]: RevIN, patch embedding, residual blocks and linear head.
//! * [`train`]: windowing, loss, Adam, early stopping and evaluation.
//! * [`data`] and [`diagnostics`]: CSV ingestion, splits, the synthetic
//!   regime generator and non-stationarity profiles.
//! * [`config`] and [`checkpoint`]: run configuration and model persistence.
//! * [`invariants`]: finite-difference and structural self-checks.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod invariants;
pub mod par;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
