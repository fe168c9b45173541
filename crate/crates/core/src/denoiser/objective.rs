use serde::{Deserialize, Serialize};

use super::model::{DenoiserModel, NoisyObservationSeq};
use crate::diffmath::{reparam_node, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::kinematics::{fk_node, shape_to_bone_scales, RootFrame, NUM_JOINTS, OBS_DIM, STATE_DIM};
use crate::motion_dvae::{step_noise, Unroll};
use crate::noise_model::ig_kl_node;

/// Equal-length noisy windows stacked row-wise, in each window's own root
/// frame.
pub struct NoisyBatch {
    /// Standardized states, one `rows x 138` tensor per frame 0..T.
    pub states: Vec<Tensor>,
    /// Local observed points, one `rows x 195` tensor per frame 0..T.
    pub obs: Vec<Tensor>,
    pub scales: Vec<[f64; NUM_JOINTS]>,
    pub frames: Vec<RootFrame>,
}

impl NoisyBatch {
    pub fn new(model: &DenoiserModel, seqs: &[&NoisyObservationSeq]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let len = first.len();
        if seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("all sequences in a batch need the same length".into()));
        }
        let frames: Vec<RootFrame> = seqs.iter().map(|s| s.frame()).collect();
        let rows = seqs.len();
        let mut states = Vec::with_capacity(len);
        let mut obs = Vec::with_capacity(len);
        for t in 0..len {
            let mut sv = Vec::with_capacity(rows * STATE_DIM);
            let mut ov = Vec::with_capacity(rows * OBS_DIM);
            for (s, f) in seqs.iter().zip(&frames) {
                sv.extend(model.stats.normalize(&f.state_to_local(&s.states[t]).to_vec()));
                ov.extend(f.obs_to_local(&s.y3d[t]).to_vec());
            }
            states.push(Tensor::matrix(rows, STATE_DIM, sv)?);
            obs.push(Tensor::matrix(rows, OBS_DIM, ov)?);
        }
        Ok(Self {
            states,
            obs,
            scales: seqs.iter().map(|s| shape_to_bone_scales(&s.shape)).collect(),
            frames,
        })
    }

    pub fn rows(&self) -> usize {
        self.states[0].rows()
    }

    /// Number of frames, `T + 1`.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Loss components, summed over frames and averaged over sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Precision-weighted squared observation error (negated `L_rec`).
    pub rec: f64,
    pub kl_dvae: f64,
    pub kl_noise: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.rec.is_finite() && self.kl_dvae.is_finite() && self.kl_noise.is_finite()
    }

    pub(crate) fn accumulate(&mut self, other: &LossTerms, weight: f64) {
        self.total += other.total * weight;
        self.rec += other.rec * weight;
        self.kl_dvae += other.kl_dvae * weight;
        self.kl_noise += other.kl_noise * weight;
    }

    pub(crate) fn scaled(mut self, f: f64) -> Self {
        self.total *= f;
        self.rec *= f;
        self.kl_dvae *= f;
        self.kl_noise *= f;
        self
    }
}

/// Nodes of one sampled pass of the inference model through the frozen
/// generative model.
pub(crate) struct Pass {
    pub mu_x0: Var,
    pub unroll: Unroll,
    /// Model points for frames 0..T, local frame, meters.
    pub points: Vec<Var>,
    /// Inverse-Gamma shape and scale for frames 0..T.
    pub noise: Vec<(Var, Var)>,
}

/// Standard-normal draws for one pass: `x0` then one tensor per latent step.
pub(crate) fn pass_noise(model: &DenoiserModel, seed: u64, rows: usize, frames: usize) -> (Tensor, Vec<Tensor>) {
    let steps = step_noise(seed, frames.saturating_sub(1), rows, model.dvae_config.d_z);
    let x0 = crate::diffmath::standard_normal(&[rows, STATE_DIM], crate::diffmath::step_seed(seed, u64::MAX));
    (x0, steps)
}

pub(crate) fn forward_pass(
    model: &DenoiserModel,
    g: &mut Graph,
    p: &ParamSet,
    batch: &NoisyBatch,
    eps_x0: &Tensor,
    eps: &[Tensor],
) -> Pass {
    let states: Vec<Var> = batch.states.iter().map(|s| g.constant(s.clone())).collect();
    let (mu_x0, var_x0) = model.omega_graph(g, p, &states);
    let x0n = reparam_node(g, mu_x0, var_x0, eps_x0);
    let net = &model.net;
    let e = net.embed(g, p, x0n);
    let gs = net.encoder_states(g, p, &states[1..]);
    let unroll = net.unroll_posterior(g, p, x0n, e, &gs, eps);
    let mut points = Vec::with_capacity(batch.len());
    let mut noise = Vec::with_capacity(batch.len());
    let zero_h = net.zero_state(g, batch.rows());
    let inv_unit = 1.0 / model.config.obs_unit;
    for t in 0..batch.len() {
        let xn = if t == 0 { x0n } else { unroll.x_mu[t - 1] };
        let raw = model.stats.denormalize_node(g, xn);
        let pts = fk_node(g, raw, &batch.scales);
        let y = g.constant(batch.obs[t].clone());
        let d = g.sub(y, pts);
        let resid = g.scale(d, inv_unit);
        let h = if t == 0 { zero_h } else { unroll.h[t - 1] };
        noise.push(model.gamma_graph(g, p, h, y, resid, e));
        points.push(pts);
    }
    Pass {
        mu_x0,
        unroll,
        points,
        noise,
    }
}

/// Record the negative ELBO of a batch (single-sample reparameterization).
pub(crate) fn loss_graph(
    model: &DenoiserModel,
    g: &mut Graph,
    p: &ParamSet,
    batch: &NoisyBatch,
    eps_x0: &Tensor,
    eps: &[Tensor],
) -> (Var, LossTerms, Pass) {
    let pass = forward_pass(model, g, p, batch, eps_x0, eps);
    let prior = model.noise_prior();
    let half_inv_unit2 = 0.5 / (model.config.obs_unit * model.config.obs_unit);
    let mut rec: Option<Var> = None;
    let mut kl_noise: Option<Var> = None;
    for t in 0..batch.len() {
        let (a, b) = pass.noise[t];
        let y = g.constant(batch.obs[t].clone());
        let d = g.sub(y, pass.points[t]);
        let sq = g.square(d);
        let precision = g.div(a, b);
        let weighted = g.mul(sq, precision);
        let s = g.sum(weighted);
        let r = g.scale(s, half_inv_unit2);
        rec = Some(match rec {
            Some(acc) => g.add(acc, r),
            None => r,
        });
        let k = ig_kl_node(g, a, b, prior);
        kl_noise = Some(match kl_noise {
            Some(acc) => g.add(acc, k),
            None => k,
        });
    }
    let zero = g.constant(Tensor::scalar(0.0));
    let rec = rec.unwrap_or(zero);
    let kl_noise = kl_noise.unwrap_or(zero);
    let kl_dvae = pass.unroll.kl.unwrap_or(zero);
    let sum = g.add(rec, kl_dvae);
    let sum = g.add(sum, kl_noise);
    let rows = batch.rows() as f64;
    let total = g.scale(sum, 1.0 / rows);
    let terms = LossTerms {
        total: g.scalar(total),
        rec: g.scalar(rec) / rows,
        kl_dvae: g.scalar(kl_dvae) / rows,
        kl_noise: g.scalar(kl_noise) / rows,
    };
    (total, terms, pass)
}

/// Loss and gradient with respect to the trainable entries of `params`.
pub fn loss_value_and_grad(model: &DenoiserModel, params: &ParamSet, batch: &NoisyBatch, seed: u64) -> (LossTerms, ParamSet) {
    let mut g = Graph::new();
    let (eps_x0, eps) = pass_noise(model, seed, batch.rows(), batch.len());
    let (loss, terms, _) = loss_graph(model, &mut g, params, batch, &eps_x0, &eps);
    let grads = g.backward(loss);
    (terms, g.param_grads(params, &grads))
}

/// Negative ELBO of one noisy sequence with its term breakdown.
pub fn unsupervised_loss(model: &DenoiserModel, y: &NoisyObservationSeq, seed: u64) -> Result<LossTerms> {
    let batch = NoisyBatch::new(model, &[y])?;
    let mut g = Graph::new();
    let (eps_x0, eps) = pass_noise(model, seed, 1, batch.len());
    let (_, terms, _) = loss_graph(model, &mut g, &model.params, &batch, &eps_x0, &eps);
    if !terms.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!(
                "unsupervised loss terms: rec {}, kl_dvae {}, kl_noise {}",
                terms.rec, terms.kl_dvae, terms.kl_noise
            ),
        });
    }
    Ok(terms)
}

/// Mean loss and summed gradient over a set of sequences, batched by
/// length. Gradients are of the mean over sequences.
pub(crate) fn set_value_and_grad(
    model: &DenoiserModel,
    params: &ParamSet,
    batches: &[NoisyBatch],
    seed: u64,
) -> (LossTerms, ParamSet) {
    let total_rows: usize = batches.iter().map(|b| b.rows()).sum();
    let mut terms = LossTerms::default();
    let mut grads = params.zeros_like();
    for (i, b) in batches.iter().enumerate() {
        let (t, gr) = loss_value_and_grad(model, params, b, crate::diffmath::step_seed(seed, i as u64));
        let w = b.rows() as f64 / total_rows as f64;
        terms.accumulate(&t, w);
        for (name, gt) in gr.iter() {
            if let Some(acc) = grads.get_mut(name) {
                let acc_vals = acc.values_mut();
                for (a, v) in acc_vals.iter_mut().zip(gt.values()) {
                    *a += w * v;
                }
            }
        }
    }
    (terms, grads)
}

/// Group sequences into equal-length batches of at most `batch_size`.
pub(crate) fn length_batches(model: &DenoiserModel, seqs: &[&NoisyObservationSeq], batch_size: usize) -> Result<Vec<NoisyBatch>> {
    let mut by_len: std::collections::BTreeMap<usize, Vec<&NoisyObservationSeq>> = Default::default();
    for s in seqs {
        by_len.entry(s.len()).or_default().push(s);
    }
    let mut out = Vec::new();
    for group in by_len.values() {
        for chunk in group.chunks(batch_size.max(1)) {
            out.push(NoisyBatch::new(model, chunk)?);
        }
    }
    Ok(out)
}
