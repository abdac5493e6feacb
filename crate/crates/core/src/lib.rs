//! Bayesian image segmentation with normalizing-flow posteriors,
//! Ornstein-Uhlenbeck latent diffusion with Girsanov reweighting and
//! closed-form variational precision updates.

pub mod data;
pub mod diffcore;
pub mod flows;
pub mod ncvi;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod sde;
pub mod spatial;
