use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm to at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First and second moment estimates for every trainable parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    moments: ParamSet,
    second: ParamSet,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            moments: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Frozen parameters are left untouched.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.update_with_lr(params, grads, self.config.lr)
    }

    pub fn update_with_lr(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .filter(|(n, _)| params.is_trainable(n))
                    .flat_map(|(_, t)| t.values().iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            if !params.is_trainable(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            let m = self.moments.get_mut(&name).expect("moment slot");
            let v = self.second.get_mut(&name).expect("moment slot");
            let p = params.get_mut(&name).expect("param");
            for i in 0..g.len() {
                let gi = g.values()[i] * scale;
                let mi = c.beta1 * m.values()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.values()[i] + (1.0 - c.beta2) * gi * gi;
                m.values_mut()[i] = mi;
                v.values_mut()[i] = vi;
                p.values_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamOutcome {
    pub params: ParamSet,
    pub loss_trace: Vec<f64>,
}

/// Per-step seed derived from a run seed.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.next_u64()
}

/// Run `config.steps` Adam updates. `objective(params, step_seed)` returns
/// the loss and its gradient.
pub fn adam_minimize<F>(mut objective: F, params: ParamSet, config: AdamConfig) -> Result<AdamOutcome>
where
    F: FnMut(&ParamSet, u64) -> Result<(f64, ParamSet)>,
{
    let mut params = params;
    let mut opt = Adam::new(&params, config.clone());
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grads) = objective(&params, step_seed(config.seed, step as u64))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss = {loss}"),
            });
        }
        trace.push(loss);
        opt.update(&mut params, &grads);
    }
    Ok(AdamOutcome {
        params,
        loss_trace: trace,
    })
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[allow(dead_code)]
pub(crate) fn tensor_norm(t: &Tensor) -> f64 {
    norm2(t.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::tensor::Tensor;

    fn scalar_params(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(w)).unwrap();
        p
    }

    fn quadratic(p: &ParamSet, _seed: u64) -> Result<(f64, ParamSet)> {
        let w = p.get("w").unwrap().values()[0];
        let mut g = p.zeros_like();
        g.get_mut("w").unwrap().values_mut()[0] = 2.0 * (w - 2.0);
        Ok(((w - 2.0).powi(2), g))
    }

    #[test]
    fn converges_on_convex_scalar() {
        let cfg = AdamConfig {
            lr: 0.05,
            steps: 500,
            ..Default::default()
        };
        let out = adam_minimize(quadratic, scalar_params(0.0), cfg).unwrap();
        let w = out.params.get("w").unwrap().values()[0];
        assert!((w - 2.0).abs() < 1e-3, "w = {w}");
        assert!(out.loss_trace.last().unwrap() < &out.loss_trace[0]);
    }

    #[test]
    fn zero_steps_is_identity() {
        let cfg = AdamConfig {
            steps: 0,
            ..Default::default()
        };
        let p = scalar_params(0.3);
        let out = adam_minimize(quadratic, p.clone(), cfg).unwrap();
        assert_eq!(out.params, p);
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let cfg = AdamConfig {
            steps: 10,
            ..Default::default()
        };
        let err = adam_minimize(
            |p, _| {
                let w = p.get("w").unwrap().values()[0];
                let loss = if w < 0.995 { f64::NAN } else { w };
                Ok((loss, {
                    let mut g = p.zeros_like();
                    g.get_mut("w").unwrap().values_mut()[0] = 1.0;
                    g
                }))
            },
            scalar_params(1.0),
            cfg,
        )
        .unwrap_err();
        match err {
            Error::NonFinite { step, .. } => assert!(step > 0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = scalar_params(0.0);
        p.insert("v", Tensor::scalar(1.0)).unwrap();
        p.freeze_prefixes(&["v"]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        let mut g = p.zeros_like();
        g.get_mut("w").unwrap().values_mut()[0] = 1.0;
        g.get_mut("v").unwrap().values_mut()[0] = 1.0;
        opt.update(&mut p, &g);
        assert_eq!(p.get("v").unwrap().values()[0], 1.0);
        assert!(p.get("w").unwrap().values()[0] < 0.0);
    }

    #[test]
    fn step_seeds_differ() {
        assert_ne!(step_seed(1, 0), step_seed(1, 1));
        assert_eq!(step_seed(1, 7), step_seed(1, 7));
    }
}
