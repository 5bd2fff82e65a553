//! Neural-process normative model: quantile preprocessing, a 3-D CNN
//! encoder onto a global latent Gaussian, a transposed-CNN decoder, ELBO
//! training and a predictive distribution split into epistemic and
//! aleatoric parts.

pub mod arch;
mod model;
mod ops;
mod persist;
mod predict;
pub mod quantile;
mod train;

pub use arch::{NpArchitecture, StagePlan, NOISE_VAR_FLOOR, STD_FLOOR};
pub use model::{Bound, DropoutSource, NpModel, LOG_NOISE_VAR};
pub use ops::{
    context_design, context_for, decode, elbo_gradients, elbo_loss, elbo_loss_mode, encode, encode_target,
    gaussian_loglik, kl_diag_gaussian, sample_latent, Decoded, ElboTerms, KlDivergence, LatentGaussian,
};
pub use persist::trainlog_csv;
pub use predict::{
    predict_distribution, predict_samples, predict_with, summarize, PredictConfig, PredictiveSummary, SampleCube,
    DEFAULT_SAMPLE_BUDGET,
};
pub use quantile::{QuantileTransform, DEFAULT_CLIP};
pub use train::{train, train_model, EpochLog, TrainSchedule};
