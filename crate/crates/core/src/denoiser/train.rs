use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DenoiserConfig, DenoiserModel, NoisyObservationSeq};
use super::objective::{length_batches, loss_value_and_grad, set_value_and_grad, LossTerms};
use crate::diffmath::{step_seed, Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::motion_dvae::DvaeModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Confidence of the Inverse-Gamma noise prior.
    pub lambda: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 16,
            lambda: 1e6,
            seed: 0,
            clip_norm: Some(50.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenoiserEpochLog {
    pub epoch: usize,
    pub train: LossTerms,
    pub val: Option<LossTerms>,
}

#[derive(Clone, Debug)]
pub struct DenoiserOutcome {
    pub model: DenoiserModel,
    /// Validation loss before any update, when a validation set was given.
    pub initial_val: Option<LossTerms>,
    pub log: Vec<DenoiserEpochLog>,
}

/// Split every sequence into the model's inference windows.
pub(crate) fn windows_of(seqs: &[NoisyObservationSeq], len: usize) -> Vec<NoisyObservationSeq> {
    seqs.iter().flat_map(|s| s.windows(len).into_iter().map(|(_, w)| w)).collect()
}

/// Fit the encoder, `omega` and `gamma` on noisy sequences. The prior's
/// generative weights are checked bit for bit afterwards; any drift is a hard
/// error.
pub fn train_denoiser(
    prior: &DvaeModel,
    denoiser: DenoiserConfig,
    train: &[NoisyObservationSeq],
    val: &[NoisyObservationSeq],
    config: &DenoiserTrainConfig,
) -> Result<DenoiserOutcome> {
    if train.is_empty() {
        return Err(Error::Invalid("no noisy training sequences".into()));
    }
    let mut model = DenoiserModel::from_prior(prior, denoiser, config.lambda)?;
    let win = model.config.window_len;
    let train_w = windows_of(train, win);
    let val_w = windows_of(val, win);
    let val_refs: Vec<&NoisyObservationSeq> = val_w.iter().collect();
    let val_batches = length_batches(&model, &val_refs, config.batch_size)?;
    let validate = |m: &DenoiserModel| -> Option<LossTerms> {
        (!val_batches.is_empty()).then(|| set_value_and_grad(m, &m.params, &val_batches, config.seed ^ 0x7a1).0)
    };
    let initial_val = validate(&model);

    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            seed: config.seed,
            clip_norm: config.clip_norm,
            ..AdamConfig::default()
        },
    );
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<&NoisyObservationSeq> = train_w.iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(step_seed(config.seed, epoch as u64)));
        let batches = length_batches(&model, &order, config.batch_size)?;
        let mut acc = LossTerms::default();
        let mut seen = 0.0;
        for batch in &batches {
            let (terms, grads) = loss_value_and_grad(&model, &model.params, batch, step_seed(config.seed ^ 0x5eed, step));
            if !terms.is_finite() || !grads.iter().all(|(_, t)| t.is_finite()) {
                return Err(Error::NonFinite {
                    step: step as usize,
                    detail: format!("epoch {epoch}: denoiser loss terms {terms:?}"),
                });
            }
            adam.update(&mut model.params, &grads);
            let k = batch.rows() as f64;
            acc.accumulate(&terms, k);
            seen += k;
            step += 1;
        }
        let train_terms = acc.scaled(1.0 / seen.max(1.0));
        let val_terms = validate(&model);
        log::info!(
            "denoiser epoch {epoch}: train {:.3} (rec {:.3}, kl dvae {:.3}, kl noise {:.3}); val {}",
            train_terms.total,
            train_terms.rec,
            train_terms.kl_dvae,
            train_terms.kl_noise,
            val_terms.map(|v| format!("{:.3}", v.total)).unwrap_or_else(|| "-".into())
        );
        log.push(DenoiserEpochLog {
            epoch,
            train: train_terms,
            val: val_terms,
        });
    }
    model.check_frozen(prior)?;
    model.trained = true;
    Ok(DenoiserOutcome {
        model,
        initial_val,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_motion, MotionKind};
    use crate::kinematics::{inject_pose_noise, BodyShape};
    use crate::motion_dvae::{train_prior, DvaeConfig, TrainConfig};

    fn tiny_prior() -> DvaeModel {
        let shape = BodyShape::default();
        let seqs: Vec<_> = (0..2)
            .map(|i| generate_motion(MotionKind::Walk, 1.0, 30.0, &shape, i).unwrap())
            .collect();
        let config = DvaeConfig {
            d_z: 4,
            hidden: 8,
            embed: 6,
            mlp_hidden: 8,
            min_var: 1e-6,
            seed: 3,
            integrate_body: false,
        };
        let tc = TrainConfig {
            epochs: 1,
            seq_len: 12,
            stride: 12,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train_prior(&seqs, &[], config, &tc).unwrap().model
    }

    fn noisy(seed: u64) -> NoisyObservationSeq {
        let clean = generate_motion(MotionKind::Wave, 0.5, 30.0, &BodyShape::default(), seed).unwrap();
        let mut y = clean.clone();
        y.frames = inject_pose_noise(&clean.frames, 0.1, seed, true).unwrap();
        NoisyObservationSeq::new(y).unwrap()
    }

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            omega_hidden: 8,
            gamma_hidden: 8,
            window_len: 8,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn training_keeps_generative_weights_and_is_reproducible() {
        let prior = tiny_prior();
        let data: Vec<_> = (0..3).map(noisy).collect();
        let config = DenoiserTrainConfig {
            epochs: 2,
            batch_size: 2,
            lambda: 10.0,
            ..DenoiserTrainConfig::default()
        };
        let a = train_denoiser(&prior, small(), &data, &data[..1], &config).unwrap();
        let b = train_denoiser(&prior, small(), &data, &data[..1], &config).unwrap();
        a.model.check_frozen(&prior).unwrap();
        assert!(a.model.trained);
        assert_eq!(a.model.params.flatten(), b.model.params.flatten());
        assert_eq!(a.log.len(), 2);
        assert!(a.initial_val.is_some());
    }

    #[test]
    fn untrained_prior_is_refused() {
        let mut prior = tiny_prior();
        prior.trained = false;
        let err = train_denoiser(&prior, small(), &[noisy(0)], &[], &DenoiserTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Untrained(_)));
    }
}
