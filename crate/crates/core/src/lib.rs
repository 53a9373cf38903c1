//! Matrix-response generalized linear mixed models (MR-GLMM) for
//! longitudinal network data.
//!
//! A response is a sequence of `n x n` adjacency matrices per subject,
//! regressed on time-varying covariates through a canonical link:
//!
//! ```text
//! g(mu_it) = Theta + theta_i + sum_l x_itl * B[:,:,l]
//! ```
//!
//! with a low-rank fixed intercept `Theta = U V^T` (Burer-Monteiro
//! factorization, or `U Lambda U^T` in the symmetric variant), a sparse
//! coefficient tensor `B`, and per-entry Gaussian random intercepts
//! `theta_i`. Estimation runs a Monte Carlo EM loop:
//!
//! * E-step: Metropolis-within-Gibbs sampling of the random intercepts
//!   ([`sampler`]),
//! * M-step: proximal gradient descent with hard thresholding under an
//!   L0 sparsity budget ([`mstep`]),
//!
//! orchestrated by [`mcem`], with EBIC-based rank/sparsity selection in
//! [`tuning`] and a synthetic-data replication harness in [`sim`].

pub mod error;
pub mod mcem;
pub mod model;
pub mod mstep;
pub mod quad;
pub mod rng;
pub mod sampler;
pub mod sim;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{
    entry_logdensity, linear_predictor, subject_loglik, theta_logprior, CoefTensor, DiagonalPolicy,
    EntryMask, Family, InterceptFactor, LongitudinalNetworkDataset, ModelParams, SubjectRecord,
};
