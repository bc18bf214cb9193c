//! Exact Gaussian Process regression scaled to large datasets by bagging.
//!
//! K exact GPs are fitted on small bootstrap subsets of the training data,
//! each with its own marginal-likelihood hyperparameter fit, and their
//! predictive Gaussians are combined by model averaging or product of
//! experts. Subset sizes come from either a probe-based search over the
//! exponent `delta` in `Ns = N^delta` or the closed-form estimator
//! `Ns = N^(1/ln ln N) / (C * eps^(1/10))`.
//!
//! ```
//! use gpbag::{data, ensemble, hyperopt::OptimizerConfig, kernels::KernelSpec};
//!
//! let full = data::generate_sinc(400, (-15.0, 15.0), 0.0, 7).unwrap().standardized();
//! let kernel: KernelSpec = "rbf".parse().unwrap();
//! let config = ensemble::EnsembleConfig { k: 4, subset_size: 40, ..Default::default() };
//! let model = ensemble::fit_ensemble(&full, &kernel, &config, &OptimizerConfig::default()).unwrap();
//! let preds = model.predict(&full.raw_x()).unwrap();
//! assert_eq!(preds.len(), 400);
//! ```

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod hyperopt;
pub mod kernels;
pub mod metrics;
pub mod rng;
pub mod selftest;
pub mod sizing;

pub use data::Dataset;
pub use ensemble::{Combination, EnsembleConfig, EnsembleModel};
pub use error::{Error, Result};
pub use gp::{GpModel, NoiseSpec, Prediction, VarianceKind};
pub use hyperopt::OptimizerConfig;
pub use kernels::KernelSpec;
pub use sizing::SizingPlan;

/// Library version, echoed in run reports and model archives.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
