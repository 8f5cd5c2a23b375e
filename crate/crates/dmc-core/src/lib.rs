//! Hybrid crop state forecasting engine.
//!
//! A recurrent network predicts the daily parameters of differentiable
//! biophysical crop models (growing-degree-day phenology, Ferguson cold
//! hardiness). The network is trained end to end through the biophysical
//! rollout with multi-task sharing across cultivars, and can be
//! recalibrated in season from sparse field observations via an error
//! encoding network.
//!
//! Module map:
//! - [`weather`]: ingest, clean, normalize, fetch, and simulate daily
//!   weather series.
//! - [`biophys`]: differentiable GDD and Ferguson models plus plain
//!   conditional-logic reference oracles.
//! - [`autodiff`]: the reverse-mode tape every trainable composite is
//!   built on.
//! - [`paramnet`]: the recurrent parameter-prediction network and its
//!   checkpoint format.
//! - [`gradtrain`]: losses, the optimizer, finite-difference gradient
//!   verification, and static gradient-descent calibration.
//! - [`hybrid`]: the network-to-biophysical-model composition and its
//!   smoothed/windowed/forecast variants.
//! - [`adapt`]: in-season adaptation with the error encoding network.
//! - [`synthgen`]: labeled synthetic dataset generation.
//! - [`baselines`]: the comparison models (deployed biophysical, deep
//!   multi-task, PINN, residual, temperature-response hybrid, and the
//!   embedding variants).
//! - [`evalbench`]: splits, metrics, statistical tests, experiment
//!   sweeps, realism checking, and integrated-gradients attribution.

pub mod adapt;
pub mod autodiff;
pub mod baselines;
pub mod biophys;
pub mod evalbench;
pub mod gradtrain;
pub mod hybrid;
pub mod paramnet;
pub mod synthgen;
pub mod weather;

mod dataset;

pub use dataset::{CropKind, CropStateSeries, Dataset, SeasonRecord};
