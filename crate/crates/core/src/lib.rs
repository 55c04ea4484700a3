//! Personalized Bayesian federated learning: clients sample local posteriors
//! with Stein variational gradient descent, the server fuses particle clouds
//! with a free-support Wasserstein barycenter, and clients turn the global
//! cloud back into a smooth prior with a Gaussian KDE.

pub mod error;
pub mod numerics;
pub mod par;
pub mod data;
pub mod model;
pub mod kde;
pub mod svgd;
pub mod ot;
pub mod barycenter;
pub mod metrics;
pub mod wire;
pub mod federation;
pub mod config;
pub mod artifacts;
pub mod validation;
pub mod ablation;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};
pub use par::Exec;
