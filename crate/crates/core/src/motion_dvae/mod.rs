//! Dynamical VAE over motion states: a latent prior and decoder that share one
//! forward recurrence over z, and an encoder that reads the observations
//! backwards in time.

mod model;
mod train;

pub use model::{
    step_noise, DvaeConfig, DvaeModel, DvaeNet, FeatureStats, LatentSeq, Unroll, CHECKPOINT_KIND, ENCODER_PREFIX,
    GENERATIVE_PREFIXES,
};
pub use train::{
    continue_training, elbo_graph, elbo_loss, elbo_value_and_grad, evaluate, fit_stats, init_training, make_windows, reconstruct,
    train_prior, Batch, ElboTerms, ElboWeights, EpochLog, TrainConfig, TrainOutcome, TrainState, Window,
};
