//! Zeroth-order optimization with seed-replayed perturbations.
//!
//! The pieces, bottom up:
//!
//! * [`rng`]: the pinned Gaussian stream and seed derivation;
//! * [`param_store`]: named tensors, selections, the in-place `axpy` kernel;
//! * [`sampler`]: full and low-rank perturbation directions;
//! * [`optimizer`]: the two-point estimator, q-query steps and training loop;
//! * [`fo`]: SGD and Adam baselines on analytic gradients;
//! * [`seedlog`]: the `.zolog` format, replay and revert;
//! * [`models`]: toy models and synthetic data;
//! * [`tta`]: episodic test-time adaptation.

pub mod error;
pub mod fo;
pub mod models;
pub mod optimizer;
pub mod param_store;
pub mod rng;
pub mod sampler;
pub mod seedlog;
pub mod tta;

pub use error::{Result, ZoError};
pub use param_store::{ElementWidth, ParamSet, ParamShape, Selection, Tensor};
pub use optimizer::{BatchMode, Combine, ZoConfig};
pub use sampler::{PerturbSpec, SamplerKind};
pub use seedlog::SeedLog;
