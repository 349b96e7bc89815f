//! Score-based KL divergence between an in-distribution prior and an
//! out-of-distribution prior, estimated from corrupted linear measurements.
//!
//! Priors are isotropic Gaussian mixtures, so every score and denoiser is
//! available in closed form and every estimator has an independent oracle.
//!
//! - [`gmm`]: mixtures, noise-convolved densities, scores, Tweedie denoisers.
//! - [`quadrature`]: the σ grid and the `∫ f(σ) σ dσ` rule.
//! - [`measurement`]: SVD-form operators with a shared right basis.
//! - [`estimators`]: image-domain, measurement-domain and invertible KL.
//! - [`adaptation`]: measurement-only refit of the out-of-distribution prior.
//! - [`experiment`]: config-driven runs, sweeps and reports.

pub mod adaptation;
pub mod basis;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod gmm;
pub mod measurement;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
pub use gmm::GaussianMixture;
pub use quadrature::{QuadratureRule, SigmaGrid};
