use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{DenoiserModel, NoisyObservationSeq};
use super::objective::{forward_pass, length_batches, pass_noise, set_value_and_grad, NoisyBatch};
use super::train::windows_of;
use crate::diffmath::{step_seed, Adam, AdamConfig, Graph, ParamSet};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, Observation3D, PoseState, RootFrame, OBS_DIM, STATE_DIM};
use crate::noise_model::{expected_shrink_weight, IGParams};

/// What regression mode returns for frames `t >= 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// The decoded motion itself, averaged over samples.
    #[default]
    PurePrior,
    /// Per-coordinate compromise between the decoded motion and the
    /// observation, weighted by the inferred noise variance.
    Blend,
}

/// `(v m + y) / (v + 1)`: the posterior mean of a unit-variance model
/// prediction `m` observed as `y` with noise variance `v`.
pub fn blend_with_variance(m: f64, y: f64, v: f64) -> f64 {
    if v.is_infinite() {
        m
    } else {
        (v * m + y) / (v + 1.0)
    }
}

/// The same blend with `v ~ q` integrated out: `w m + (1 - w) y` with
/// `w = E_q[v / (v + 1)]`.
pub fn blend_expected(m: f64, y: f64, q: &IGParams) -> f64 {
    let w = expected_shrink_weight(q);
    w * m + (1.0 - w) * y
}

/// A denoised sequence in world coordinates.
#[derive(Clone, Debug)]
pub struct Denoised {
    pub points: Vec<Observation3D>,
    pub states: Vec<PoseState>,
    /// Frame each output was computed in (that of its window).
    pub frames: Vec<RootFrame>,
    /// Per frame and coordinate, in `frames[t]` coordinates: the smallest and
    /// largest of the observation and every sampled model prediction.
    pub envelope: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Denoised {
    /// Largest violation of the envelope over all coordinates (0 when every
    /// output lies inside it).
    pub fn envelope_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for ((p, f), (lo, hi)) in self.points.iter().zip(&self.frames).zip(&self.envelope) {
            for ((v, l), h) in f.obs_to_local(p).to_vec().iter().zip(lo).zip(hi) {
                worst = worst.max(l - v).max(v - h);
            }
        }
        worst
    }
}

fn ig(a: f64, b: f64) -> IGParams {
    IGParams {
        alpha: a.max(f64::MIN_POSITIVE),
        beta_scale: b.max(f64::MIN_POSITIVE),
    }
}

fn row(values: &[f64], cols: usize, r: usize) -> &[f64] {
    &values[r * cols..(r + 1) * cols]
}

fn state_mean(rows: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut acc = vec![0.0; STATE_DIM];
    let mut n = 0.0;
    for r in rows {
        acc.iter_mut().zip(&r).for_each(|(a, v)| *a += v);
        n += 1.0;
    }
    acc.iter().map(|v| v / n).collect()
}

fn regress(model: &DenoiserModel, params: &ParamSet, y: &NoisyObservationSeq, n: usize, seed: u64, mode: OutputMode) -> Result<Denoised> {
    if !model.trained {
        return Err(Error::Untrained("the denoiser has not been trained".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("n_samples must be at least 1".into()));
    }
    let len = y.len();
    let mut points = vec![None; len];
    let mut states = vec![None; len];
    let mut frames = vec![RootFrame::WORLD; len];
    let mut envelope = vec![(Vec::new(), Vec::new()); len];
    let mut groups: BTreeMap<usize, Vec<(usize, NoisyObservationSeq)>> = BTreeMap::new();
    for (start, w) in y.windows(model.config.window_len) {
        groups.entry(w.len()).or_default().push((start, w));
    }
    for (gi, group) in groups.values().enumerate() {
        let refs: Vec<&NoisyObservationSeq> = group.iter().flat_map(|(_, w)| std::iter::repeat_n(w, n)).collect();
        let batch = NoisyBatch::new(model, &refs)?;
        let rows = batch.rows();
        let (eps_x0, eps) = pass_noise(model, step_seed(seed, gi as u64), rows, batch.len());
        let mut g = Graph::new();
        let pass = forward_pass(model, &mut g, params, &batch, &eps_x0, &eps);
        let mu_x0 = g.value(pass.mu_x0).values().to_vec();
        for (wi, (start, w)) in group.iter().enumerate() {
            let frame = batch.frames[wi * n];
            let sample_rows = wi * n..(wi + 1) * n;
            // initial state: the predictor's mean, no sampling
            let x0 = PoseState::from_slice(&model.stats.denormalize(row(&mu_x0, STATE_DIM, wi * n)))?;
            let x0_world = frame.state_to_world(&x0);
            let p0 = forward_kinematics(&x0_world, &w.shape);
            let local0 = frame.obs_to_local(&p0).to_vec();
            let y0 = batch.obs[0].values();
            let y0 = row(y0, OBS_DIM, wi * n);
            envelope[*start] = (
                local0.iter().zip(y0).map(|(a, b)| a.min(*b)).collect(),
                local0.iter().zip(y0).map(|(a, b)| a.max(*b)).collect(),
            );
            points[*start] = Some(p0);
            states[*start] = Some(x0_world);
            frames[*start] = frame;
            for t in 1..w.len() {
                let m_all = g.value(pass.points[t]).values();
                let y_t = row(batch.obs[t].values(), OBS_DIM, wi * n);
                let (a_all, b_all) = (g.value(pass.noise[t].0).values(), g.value(pass.noise[t].1).values());
                let mut out = vec![0.0; OBS_DIM];
                let mut lo = y_t.to_vec();
                let mut hi = y_t.to_vec();
                for r in sample_rows.clone() {
                    let m = row(m_all, OBS_DIM, r);
                    let (a, b) = (row(a_all, OBS_DIM, r), row(b_all, OBS_DIM, r));
                    for k in 0..OBS_DIM {
                        lo[k] = lo[k].min(m[k]);
                        hi[k] = hi[k].max(m[k]);
                        out[k] += match mode {
                            OutputMode::PurePrior => m[k],
                            OutputMode::Blend => blend_expected(m[k], y_t[k], &ig(a[k], b[k])),
                        } / n as f64;
                    }
                }
                let xs = g.value(pass.unroll.x_mu[t - 1]).values();
                let mean = state_mean(sample_rows.clone().map(|r| model.stats.denormalize(row(xs, STATE_DIM, r))));
                let s = frame.state_to_world(&PoseState::from_slice(&mean)?);
                points[start + t] = Some(frame.obs_to_world(&Observation3D::from_slice(&out)?));
                states[start + t] = Some(s);
                frames[start + t] = frame;
                envelope[start + t] = (lo, hi);
            }
        }
    }
    let points: Vec<Observation3D> = points.into_iter().map(|p| p.expect("every frame covered")).collect();
    if points.iter().any(|p| !p.to_vec().iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite {
            step: 0,
            detail: "denoised output".into(),
        });
    }
    Ok(Denoised {
        points,
        states: states.into_iter().map(|s| s.expect("every frame covered")).collect(),
        frames,
        envelope,
    })
}

/// Denoise one sequence with a single pass of the inference networks per
/// window, averaging `n_samples` draws of the initial state and latents.
/// Frame 0 is the decoded mean of the initial-state predictor.
pub fn denoise_regression(model: &DenoiserModel, y: &NoisyObservationSeq, n_samples: usize, seed: u64, mode: OutputMode) -> Result<Denoised> {
    regress(model, &model.params, y, n_samples, seed, mode)
}

/// Gaussian over the initial state of `y`'s first window: mean in world
/// coordinates and per-feature variance in raw units.
pub fn predict_initial_state(model: &DenoiserModel, y: &NoisyObservationSeq) -> Result<(PoseState, Vec<f64>)> {
    let (_, w) = y.windows(model.config.window_len).into_iter().next().expect("sequence has frames");
    let batch = NoisyBatch::new(model, &[&w])?;
    let mut g = Graph::new();
    let states: Vec<_> = batch.states.iter().map(|s| g.constant(s.clone())).collect();
    let (mu, var) = model.omega_graph(&mut g, &model.params, &states);
    let local = PoseState::from_slice(&model.stats.denormalize(g.value(mu).values()))?;
    let var = g.value(var).values().iter().zip(&model.stats.std).map(|(v, s)| v * s * s).collect();
    Ok((batch.frames[0].state_to_world(&local), var))
}

/// Inverse-Gamma posterior of every observed coordinate (in the window's
/// root frame), from one sampled pass.
pub fn noise_posteriors(model: &DenoiserModel, y: &NoisyObservationSeq, seed: u64) -> Result<Vec<Vec<IGParams>>> {
    let mut out = Vec::with_capacity(y.len());
    for (i, (_, w)) in y.windows(model.config.window_len).into_iter().enumerate() {
        let batch = NoisyBatch::new(model, &[&w])?;
        let (eps_x0, eps) = pass_noise(model, step_seed(seed, i as u64), 1, batch.len());
        let mut g = Graph::new();
        let pass = forward_pass(model, &mut g, &model.params, &batch, &eps_x0, &eps);
        for (a, b) in &pass.noise {
            let (a, b) = (g.value(*a).values(), g.value(*b).values());
            out.push(a.iter().zip(b).map(|(&a, &b)| ig(a, b)).collect());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub n_samples: usize,
    pub mode: OutputMode,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 64,
            n_samples: 10,
            mode: OutputMode::PurePrior,
            seed: 0,
            clip_norm: Some(50.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub predictions: Vec<Denoised>,
    /// The adapted clone; the input model is never modified.
    pub model: DenoiserModel,
    /// Loss of the whole set at each evaluated iterate.
    pub loss_trace: Vec<f64>,
    pub best_iter: usize,
    pub diverged: bool,
}

/// Adapt a clone of the inference networks to a whole set of noisy sequences
/// by `iters` Adam steps on the unsupervised loss, keep the best iterate, and
/// denoise every sequence with it in regression mode. Training stops early
/// once the loss exceeds ten times its initial value.
pub fn denoise_optimization(model: &DenoiserModel, set: &[NoisyObservationSeq], iters: usize, config: &OptimizeConfig) -> Result<OptimizeOutcome> {
    if !model.trained {
        return Err(Error::Untrained("the denoiser has not been trained".into()));
    }
    let mut adapted = model.clone();
    let mut trace: Vec<f64> = Vec::new();
    let mut best_iter = 0;
    let mut diverged = false;
    if iters > 0 {
        let windows = windows_of(set, model.config.window_len);
        let refs: Vec<&NoisyObservationSeq> = windows.iter().collect();
        let batches = length_batches(model, &refs, config.batch_size)?;
        let mut params = model.params.clone();
        let mut best = params.clone();
        let mut best_loss = f64::INFINITY;
        let mut adam = Adam::new(
            &params,
            AdamConfig {
                lr: config.lr,
                seed: config.seed,
                clip_norm: config.clip_norm,
                ..AdamConfig::default()
            },
        );
        // the same noise draws at every iterate, so losses are comparable
        let loss_seed = step_seed(config.seed, 0x0b7);
        for it in 0..=iters {
            let (terms, grads) = set_value_and_grad(model, &params, &batches, loss_seed);
            let loss = terms.total;
            if !loss.is_finite() || (!trace.is_empty() && loss > 10.0 * trace[0].abs()) {
                trace.push(loss);
                diverged = true;
                break;
            }
            trace.push(loss);
            if loss < best_loss {
                best_loss = loss;
                best = params.clone();
                best_iter = it;
            }
            if it == iters {
                break;
            }
            adam.update(&mut params, &grads);
        }
        adapted.params = best;
    }
    let predictions = set
        .iter()
        .map(|y| regress(&adapted, &adapted.params, y, config.n_samples, config.seed, config.mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(OptimizeOutcome {
        predictions,
        model: adapted,
        loss_trace: trace,
        best_iter,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_limits_and_scalar_case() {
        assert_eq!(blend_with_variance(2.0, 4.0, 1.0), 3.0);
        assert_eq!(blend_with_variance(2.0, 4.0, 0.0), 4.0);
        assert_eq!(blend_with_variance(2.0, 4.0, f64::INFINITY), 2.0);
        assert!((blend_with_variance(2.0, 4.0, 1e12) - 2.0).abs() < 1e-11);
    }

    #[test]
    fn expected_blend_tracks_confident_and_vague_noise() {
        // mean variance 1e-8: trust the observation
        let tight = IGParams::new(1e6, 1e-2).unwrap();
        assert!((blend_expected(2.0, 4.0, &tight) - 4.0).abs() < 1e-7);
        // mean variance 1e8: trust the model
        let loose = IGParams::new(1e6, 1e14).unwrap();
        assert!((blend_expected(2.0, 4.0, &loose) - 2.0).abs() < 1e-7);
        // concentrated at v = 1: the scalar case
        let unit = IGParams::new(1e6, 1e6).unwrap();
        assert!((blend_expected(2.0, 4.0, &unit) - 3.0).abs() < 1e-5);
    }

    #[test]
    fn expected_blend_is_convex() {
        for &(a, b) in &[(0.5, 0.1), (2.0, 3.0), (40.0, 1.0), (500.0, 2000.0)] {
            let q = IGParams::new(a, b).unwrap();
            for &(m, y) in &[(1.0, -1.0), (-3.0, 5.0), (0.2, 0.2)] {
                let v = blend_expected(m, y, &q);
                assert!(v >= m.min(y) - 1e-12 && v <= m.max(y) + 1e-12);
            }
        }
    }
}
