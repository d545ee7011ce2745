//! Gaussian process normative modeling of brain age.
//!
//! A GP regression model is trained on healthy subjects to predict
//! chronological age from tabular morphometric features. New subjects are
//! then scored with three abnormality metrics: the prediction error
//! `y_hat - y`, the GP posterior variance, and the posterior variance under
//! an age-weighted kernel that also penalizes resemblance to healthy
//! subjects of a different age. The [`stats`] module holds the group-level
//! evaluation: rank-sum tests, ROC/AUC, correlations and a fixed-effects
//! volume model.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root pin the `f64` instantiation used by file I/O and the CLI.

pub mod error;
pub mod gp;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use gp::{fit, AgeNormalization, FitConfig, JitterLadder, TargetTransform};
pub use kernels::{AgeKernelParams, KernelForm, KernelParams};
pub use metrics::{ModelConfig, NormativeModel};
pub use scalar::Real;

pub type Model = NormativeModel<f64>;
pub type ModelF32 = NormativeModel<f32>;
pub type TrainedModel = gp::TrainedModel<f64>;
pub type Kernel = KernelParams<f64>;
pub type AgeKernel = AgeKernelParams<f64>;
pub type Standardizer = preprocess::Standardizer<f64>;
pub type PcaTransform = preprocess::PcaTransform<f64>;
pub type PredictionResult = gp::PredictionResult<f64>;
pub type AnomalyScores = metrics::AnomalyScores<f64>;
