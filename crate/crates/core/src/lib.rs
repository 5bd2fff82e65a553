//! Deep normative modeling of volumetric measurements.
//!
//! Bootstrap fixed-effect fits act as context functions for a neural
//! process whose global latent variable absorbs random-effect and noise
//! structure. Test-time deviations from the learned norm become normative
//! probability maps, which are summarized by block maxima and turned into
//! abnormality probabilities with a generalized extreme value fit.

pub mod cohort;
pub mod error;
pub mod mixed_effect;
pub mod neural_process;
pub mod normative;
pub mod tensorcore;

pub use error::{Error, Result};
pub use tensorcore::{Rng, Tensor};
