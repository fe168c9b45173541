//! Unsupervised learned denoising on top of a frozen motion prior.
//!
//! Two inference networks are added: `omega` maps a whole noisy sequence to a
//! Gaussian over the initial state, `gamma` maps each step's observation,
//! latent history and initial-state embedding to Inverse-Gamma posteriors over
//! per-coordinate noise variances. Together with the prior's encoder they are
//! fitted by maximizing an ELBO on noisy data alone; the prior and decoder
//! never change.

mod infer;
mod model;
mod objective;
mod train;

pub use infer::{
    blend_expected, blend_with_variance, denoise_optimization, denoise_regression, noise_posteriors,
    predict_initial_state, Denoised, OptimizeConfig, OptimizeOutcome, OutputMode,
};
pub use model::{DenoiserConfig, DenoiserModel, NoisyObservationSeq, CHECKPOINT_KIND, GAMMA_PREFIX, OMEGA_PREFIX};
pub use objective::{loss_value_and_grad, unsupervised_loss, LossTerms, NoisyBatch};
pub use train::{train_denoiser, DenoiserEpochLog, DenoiserOutcome, DenoiserTrainConfig};
