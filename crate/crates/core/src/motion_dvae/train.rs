use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{step_noise, DvaeModel, DvaeNet, FeatureStats};
use crate::corpus::MotionSequence;
use crate::diffmath::{step_seed, Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::kinematics::{
    fk_flat, fk_node, shape_to_bone_scales, BodyShape, PoseState, RootFrame, NUM_JOINTS, OBS_DIM, STATE_DIM,
};

/// Relative weights of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboWeights {
    /// Weight of the squared joint/marker reconstruction error.
    pub w_rec_mesh: f64,
    /// Likelihood standard deviation in standardized feature units.
    pub rec_std: f64,
    /// Length, in meters, that counts as one unit of the point error.
    pub mesh_unit: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        Self {
            w_rec_mesh: 1.0,
            rec_std: 0.1,
            mesh_unit: 0.02,
        }
    }
}

/// One training window: the conditioning frame and the frames after it,
/// expressed in the root frame of the conditioning frame.
#[derive(Clone, Debug)]
pub struct Window {
    pub x0: PoseState,
    pub frames: Vec<PoseState>,
    pub scales: [f64; NUM_JOINTS],
}

impl Window {
    /// Window from world-frame states.
    pub fn new(x0: &PoseState, frames: &[PoseState], scales: [f64; NUM_JOINTS]) -> Self {
        let f = RootFrame::of(x0);
        Self {
            x0: f.state_to_local(x0),
            frames: frames.iter().map(|s| f.state_to_local(s)).collect(),
            scales,
        }
    }
}

/// Cut sequences into windows of `len` frames (`len - 1` modeled steps).
/// Velocities are computed on the whole sequence before cutting.
pub fn make_windows(seqs: &[MotionSequence], len: usize, stride: usize) -> Result<Vec<Window>> {
    if len < 2 {
        return Err(Error::Invalid(format!("windows need at least 2 frames, got {len}")));
    }
    let mut out = Vec::new();
    for seq in seqs {
        let states = seq.states()?;
        let scales = shape_to_bone_scales(&seq.betas);
        let mut start = 0;
        while start + len <= states.len() {
            out.push(Window::new(&states[start], &states[start + 1..start + len], scales));
            start += stride.max(1);
        }
    }
    Ok(out)
}

/// Feature statistics over every frame of every window.
pub fn fit_stats(windows: &[Window]) -> Result<FeatureStats> {
    let vecs: Vec<Vec<f64>> = windows
        .iter()
        .flat_map(|w| std::iter::once(&w.x0).chain(&w.frames))
        .map(|s| s.to_vec())
        .collect();
    FeatureStats::fit(vecs.iter().map(|v| v.as_slice()))
}

/// Windows stacked row-wise: one row per window, one tensor per step.
pub struct Batch {
    pub x0n: Tensor,
    pub xs: Vec<Tensor>,
    pub mesh: Vec<Tensor>,
    pub scales: Vec<[f64; NUM_JOINTS]>,
}

impl Batch {
    pub fn new(stats: &FeatureStats, windows: &[&Window]) -> Result<Self> {
        Self::with_headings(stats, windows, &vec![0.0; windows.len()])
    }

    /// Batch with window `i` turned by `yaw[i]` about the vertical axis.
    pub fn with_headings(stats: &FeatureStats, windows: &[&Window], yaw: &[f64]) -> Result<Self> {
        if yaw.len() != windows.len() {
            return Err(Error::Shape(format!("{} heading offsets for {} windows", yaw.len(), windows.len())));
        }
        let turns: Vec<RootFrame> = yaw.iter().map(|&y| RootFrame::WORLD.rotated(-y)).collect();
        let first = windows.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let steps = first.frames.len();
        if windows.iter().any(|w| w.frames.len() != steps) {
            return Err(Error::Shape("all windows in a batch need the same length".into()));
        }
        let rows = windows.len();
        let x0n: Vec<f64> = windows
            .iter()
            .zip(&turns)
            .flat_map(|(w, f)| stats.normalize(&f.state_to_local(&w.x0).to_vec()))
            .collect();
        let mut xs = Vec::with_capacity(steps);
        let mut mesh = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut xv = Vec::with_capacity(rows * STATE_DIM);
            let mut mv = Vec::with_capacity(rows * OBS_DIM);
            for (w, f) in windows.iter().zip(&turns) {
                let s = f.state_to_local(&w.frames[t]).to_vec();
                xv.extend(stats.normalize(&s));
                mv.extend(fk_flat(&w.scales, &s));
            }
            xs.push(Tensor::matrix(rows, STATE_DIM, xv)?);
            mesh.push(Tensor::matrix(rows, OBS_DIM, mv)?);
        }
        Ok(Self {
            x0n: Tensor::matrix(rows, STATE_DIM, x0n)?,
            xs,
            mesh,
            scales: windows.iter().map(|w| w.scales).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.x0n.rows()
    }

    pub fn steps(&self) -> usize {
        self.xs.len()
    }
}

/// Loss components, summed over steps and averaged over windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub rec: f64,
    pub mesh: f64,
    pub kl: f64,
}

impl ElboTerms {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.rec.is_finite() && self.mesh.is_finite() && self.kl.is_finite()
    }
}

/// Squared error between a node and a constant, summed, times `scale`.
pub(crate) fn scaled_sq_error(g: &mut Graph, pred: Var, target: Var, scale: f64) -> Var {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, scale)
}

pub(crate) fn add_opt(g: &mut Graph, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => g.add(a, v),
        None => v,
    })
}

/// Record the negative ELBO of a batch; returns the loss node and the
/// per-window term values.
pub fn elbo_graph(
    net: &DvaeNet,
    stats: &FeatureStats,
    g: &mut Graph,
    params: &ParamSet,
    batch: &Batch,
    eps: &[Tensor],
    weights: &ElboWeights,
    kl_weight: f64,
) -> (Var, ElboTerms) {
    let rows = batch.rows() as f64;
    let x0n = g.constant(batch.x0n.clone());
    let e = net.embed(g, params, x0n);
    let xs: Vec<Var> = batch.xs.iter().map(|x| g.constant(x.clone())).collect();
    let gs = net.encoder_states(g, params, &xs);
    let un = net.unroll_posterior(g, params, x0n, e, &gs, eps);
    let rec_scale = 0.5 / (weights.rec_std * weights.rec_std);
    let mesh_scale = weights.w_rec_mesh / (weights.mesh_unit * weights.mesh_unit);
    let mut rec = None;
    let mut mesh = None;
    for (t, &mu) in un.x_mu.iter().enumerate() {
        let r = scaled_sq_error(g, mu, xs[t], rec_scale);
        rec = add_opt(g, rec, r);
        if weights.w_rec_mesh != 0.0 {
            let raw = stats.denormalize_node(g, mu);
            let pts = fk_node(g, raw, &batch.scales);
            let target = g.constant(batch.mesh[t].clone());
            let m = scaled_sq_error(g, pts, target, mesh_scale);
            mesh = add_opt(g, mesh, m);
        }
    }
    let zero = g.constant(Tensor::scalar(0.0));
    let rec = rec.unwrap_or(zero);
    let mesh = mesh.unwrap_or(zero);
    let kl = un.kl.unwrap_or(zero);
    let weighted_kl = g.scale(kl, kl_weight);
    let sum = g.add(rec, mesh);
    let sum = g.add(sum, weighted_kl);
    let total = g.scale(sum, 1.0 / rows);
    let terms = ElboTerms {
        total: g.scalar(total),
        rec: g.scalar(rec) / rows,
        mesh: g.scalar(mesh) / rows,
        kl: g.scalar(kl) / rows,
    };
    (total, terms)
}

/// Loss and gradient with respect to the trainable entries of `params`.
pub fn elbo_value_and_grad(
    model: &DvaeModel,
    params: &ParamSet,
    batch: &Batch,
    seed: u64,
    weights: &ElboWeights,
    kl_weight: f64,
) -> (ElboTerms, ParamSet) {
    let mut g = Graph::new();
    let eps = step_noise(seed, batch.steps(), batch.rows(), model.config.d_z);
    let (loss, terms) = elbo_graph(&model.net, &model.stats, &mut g, params, batch, &eps, weights, kl_weight);
    let grads = g.backward(loss);
    (terms, g.param_grads(params, &grads))
}

/// Negative ELBO of one sequence (`x_seq` are frames 1..T after `x0`).
pub fn elbo_loss(
    model: &DvaeModel,
    x0: &PoseState,
    x_seq: &[PoseState],
    shape: &BodyShape,
    weights: &ElboWeights,
    seed: u64,
) -> Result<ElboTerms> {
    if x_seq.is_empty() {
        return Err(Error::Invalid("elbo_loss needs at least one frame after x0".into()));
    }
    let w = Window::new(x0, x_seq, shape_to_bone_scales(shape));
    let batch = Batch::new(&model.stats, &[&w])?;
    let mut g = Graph::new();
    let eps = step_noise(seed, batch.steps(), 1, model.config.d_z);
    let (_, terms) = elbo_graph(&model.net, &model.stats, &mut g, &model.params, &batch, &eps, weights, 1.0);
    if !terms.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("elbo terms {terms:?}"),
        });
    }
    Ok(terms)
}

/// Encode with posterior means (no sampling) and decode.
pub fn reconstruct(model: &DvaeModel, x0: &PoseState, x_seq: &[PoseState]) -> Result<Vec<PoseState>> {
    let frame = RootFrame::of(x0);
    let mut g = Graph::new();
    let p = &model.params;
    let x0n = g.constant(Tensor::row(model.normalize_state(&frame.state_to_local(x0))));
    let e = model.net.embed(&mut g, p, x0n);
    let xs: Vec<Var> = x_seq
        .iter()
        .map(|s| g.constant(Tensor::row(model.normalize_state(&frame.state_to_local(s)))))
        .collect();
    let gs = model.net.encoder_states(&mut g, p, &xs);
    let eps = vec![Tensor::zeros(&[1, model.config.d_z]); x_seq.len()];
    let un = model.net.unroll_posterior(&mut g, p, x0n, e, &gs, &eps);
    un.x_mu
        .iter()
        .map(|&v| PoseState::from_slice(&model.stats.denormalize(g.value(v).values())).map(|s| frame.state_to_world(&s)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Window length in frames, including the conditioning frame.
    pub seq_len: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of epochs over which the KL weight ramps linearly to one.
    pub kl_warmup_frac: f64,
    pub clip_norm: Option<f64>,
    pub weights: ElboWeights,
    /// Standard deviation (rad) of a random heading turn applied to each
    /// training window, so the model tolerates a misestimated frame.
    pub heading_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 2e-3,
            seq_len: 60,
            stride: 30,
            batch_size: 16,
            seed: 0,
            kl_warmup_frac: 0.2,
            clip_norm: Some(50.0),
            weights: ElboWeights::default(),
            heading_jitter: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        let warm = (self.kl_warmup_frac * self.epochs as f64).ceil() as usize;
        if warm == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / warm as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub kl_weight: f64,
    pub train: ElboTerms,
    pub val: Option<ElboTerms>,
}

/// Optimizer state that lets training resume bit-exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub adam: Adam,
    pub epochs_done: usize,
}

pub struct TrainOutcome {
    pub model: DvaeModel,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

/// Mean loss over windows with a fixed sampling seed and full KL weight.
pub fn evaluate(model: &DvaeModel, windows: &[Window], batch_size: usize, weights: &ElboWeights, seed: u64) -> Result<ElboTerms> {
    let mut acc = ElboTerms::default();
    let mut n = 0.0;
    for (i, chunk) in windows.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&Window> = chunk.iter().collect();
        let batch = Batch::new(&model.stats, &refs)?;
        let mut g = Graph::new();
        let eps = step_noise(step_seed(seed, i as u64), batch.steps(), batch.rows(), model.config.d_z);
        let (_, t) = elbo_graph(&model.net, &model.stats, &mut g, &model.params, &batch, &eps, weights, 1.0);
        let k = chunk.len() as f64;
        acc.total += t.total * k;
        acc.rec += t.rec * k;
        acc.mesh += t.mesh * k;
        acc.kl += t.kl * k;
        n += k;
    }
    if n > 0.0 {
        acc.total /= n;
        acc.rec /= n;
        acc.mesh /= n;
        acc.kl /= n;
    }
    Ok(acc)
}

/// Fit the generative model and encoder on clean windows.
pub fn train_prior(
    train: &[MotionSequence],
    val: &[MotionSequence],
    dvae: super::DvaeConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let (model, state) = init_training(train, dvae, config)?;
    continue_training(model, state, train, val, config, config.epochs)
}

/// Fresh model (statistics fitted on `train`) and optimizer state.
pub fn init_training(train: &[MotionSequence], dvae: super::DvaeConfig, config: &TrainConfig) -> Result<(DvaeModel, TrainState)> {
    let windows = make_windows(train, config.seq_len, config.stride)?;
    if windows.is_empty() {
        return Err(Error::Invalid(format!("no training sequence has {} frames", config.seq_len)));
    }
    let model = DvaeModel::new(dvae, fit_stats(&windows)?)?;
    let adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            seed: config.seed,
            clip_norm: config.clip_norm,
            ..Default::default()
        },
    );
    Ok((model, TrainState { adam, epochs_done: 0 }))
}

/// Run epochs `state.epochs_done..until` of `config` from a saved state.
pub fn continue_training(
    mut model: DvaeModel,
    mut state: TrainState,
    train: &[MotionSequence],
    val: &[MotionSequence],
    config: &TrainConfig,
    until: usize,
) -> Result<TrainOutcome> {
    let windows = make_windows(train, config.seq_len, config.stride)?;
    let val_windows = make_windows(val, config.seq_len, config.seq_len)?;
    if windows.is_empty() {
        return Err(Error::Invalid(format!("no training sequence has {} frames", config.seq_len)));
    }
    let mut log = Vec::new();
    let mut step = state.adam.steps_taken() as usize;
    for epoch in state.epochs_done..until.min(config.epochs) {
        let kl_weight = config.kl_weight(epoch);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(step_seed(config.seed, epoch as u64)));
        let mut acc = ElboTerms::default();
        let mut seen = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let refs: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let mut turn_rng = ChaCha8Rng::seed_from_u64(step_seed(config.seed ^ 0x7a11, step as u64));
            let yaw: Vec<f64> = refs
                .iter()
                .map(|_| config.heading_jitter * turn_rng.sample::<f64, _>(StandardNormal))
                .collect();
            let batch = Batch::with_headings(&model.stats, &refs, &yaw)?;
            let seed = step_seed(config.seed ^ 0x5eed, step as u64);
            let (terms, grads) = elbo_value_and_grad(&model, &model.params, &batch, seed, &config.weights, kl_weight);
            if !terms.is_finite() || !grads.iter().all(|(_, t)| t.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("epoch {epoch}: loss terms {terms:?}"),
                });
            }
            state.adam.update(&mut model.params, &grads);
            let k = chunk.len() as f64;
            acc.total += terms.total * k;
            acc.rec += terms.rec * k;
            acc.mesh += terms.mesh * k;
            acc.kl += terms.kl * k;
            seen += k;
            step += 1;
        }
        acc.total /= seen;
        acc.rec /= seen;
        acc.mesh /= seen;
        acc.kl /= seen;
        let val_terms = if val_windows.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val_windows, config.batch_size, &config.weights, config.seed)?)
        };
        log::info!(
            "epoch {epoch}: train {:.3} (rec {:.3}, mesh {:.3}, kl {:.3}, kl weight {kl_weight:.2}); val {}",
            acc.total,
            acc.rec,
            acc.mesh,
            acc.kl,
            val_terms.map(|v| format!("{:.3}", v.total)).unwrap_or_else(|| "-".into())
        );
        log.push(EpochLog {
            epoch,
            kl_weight,
            train: acc,
            val: val_terms,
        });
        state.epochs_done = epoch + 1;
    }
    model.trained = state.epochs_done > 0;
    Ok(TrainOutcome { model, state, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_motion, MotionKind};
    use crate::diffmath::{grad_check_with, GradCheckConfig};
    use crate::motion_dvae::DvaeConfig;

    pub(crate) fn toy_config() -> DvaeConfig {
        DvaeConfig {
            d_z: 4,
            hidden: 8,
            embed: 6,
            mlp_hidden: 8,
            min_var: 1e-6,
            seed: 3,
            integrate_body: false,
        }
    }

    fn toy_windows(frames: usize) -> Vec<Window> {
        let seqs: Vec<MotionSequence> = [MotionKind::Walk, MotionKind::Squat]
            .iter()
            .enumerate()
            .map(|(i, k)| generate_motion(*k, frames as f64 / 30.0, 30.0, &BodyShape::default(), i as u64).unwrap())
            .collect();
        make_windows(&seqs, frames, frames).unwrap()
    }

    #[test]
    fn full_elbo_gradient_matches_differences() {
        let windows = toy_windows(4);
        let stats = fit_stats(&windows).unwrap();
        let model = DvaeModel::new(toy_config(), stats).unwrap();
        let refs: Vec<&Window> = windows.iter().collect();
        let batch = Batch::new(&model.stats, &refs).unwrap();
        assert_eq!(batch.steps(), 3);
        let weights = ElboWeights {
            w_rec_mesh: 1.0,
            rec_std: 1.0,
            mesh_unit: 1.0,
        };
        let f0 = elbo_value_and_grad(&model, &model.params, &batch, 11, &weights, 0.7).0.total;
        // Central differences lose ~|f|·1e-16/ε absolutely; floor tracks that scale.
        let report = grad_check_with(
            |p| {
                let (t, g) = elbo_value_and_grad(&model, p, &batch, 11, &weights, 0.7);
                Ok((t.total, g))
            },
            &model.params,
            &GradCheckConfig {
                max_coords_per_param: Some(12),
                floor: 1e-6 * f0.abs().max(1.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn zero_mesh_weight_is_plain_elbo() {
        let windows = toy_windows(5);
        let model = DvaeModel::new(toy_config(), fit_stats(&windows).unwrap()).unwrap();
        let w = &windows[0];
        let shape = BodyShape::default();
        let plain = ElboWeights {
            w_rec_mesh: 0.0,
            ..Default::default()
        };
        let t = elbo_loss(&model, &w.x0, &w.frames, &shape, &plain, 1).unwrap();
        assert_eq!(t.mesh, 0.0);
        assert!((t.total - t.rec - t.kl).abs() < 1e-9 * t.total.abs());
        assert!(t.kl >= 0.0);
    }

    #[test]
    fn kl_warmup_is_linear_over_first_fifth() {
        let c = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        assert_eq!(c.kl_weight(0), 0.5);
        assert_eq!(c.kl_weight(1), 1.0);
        assert_eq!(c.kl_weight(9), 1.0);
    }

    #[test]
    fn windows_match_protocol() {
        let s = generate_motion(MotionKind::Walk, 4.0, 30.0, &BodyShape::default(), 0).unwrap();
        let w = make_windows(&[s.clone()], 60, 60).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].frames.len(), 59);
        let states = s.states().unwrap();
        let f = RootFrame::of(&states[60]);
        assert_eq!(w[1].x0, f.state_to_local(&states[60]));
        assert_eq!(w[1].frames[58], f.state_to_local(&states[119]));
        assert!(make_windows(&[s], 1, 1).is_err());
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let seqs: Vec<MotionSequence> = (0..4)
            .map(|i| generate_motion(MotionKind::ALL[i % 4], 0.4, 30.0, &BodyShape::default(), i as u64).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 6,
            seq_len: 12,
            stride: 12,
            batch_size: 2,
            lr: 5e-3,
            ..Default::default()
        };
        let a = train_prior(&seqs, &seqs[..1], toy_config(), &cfg).unwrap();
        let b = train_prior(&seqs, &seqs[..1], toy_config(), &cfg).unwrap();
        assert!(a.model.params.bit_equal_on(&b.model.params, &[""]).is_ok());
        assert!(a.log.last().unwrap().train.total < a.log[0].train.total);
        assert!(a.model.trained);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let seqs: Vec<MotionSequence> = (0..3)
            .map(|i| generate_motion(MotionKind::ALL[i], 0.3, 30.0, &BodyShape::default(), i as u64).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 4,
            seq_len: 9,
            stride: 9,
            batch_size: 2,
            ..Default::default()
        };
        let whole = train_prior(&seqs, &[], toy_config(), &cfg).unwrap();
        let (model, state) = init_training(&seqs, toy_config(), &cfg).unwrap();
        let half = continue_training(model, state, &seqs, &[], &cfg, 2).unwrap();
        assert_eq!(half.state.epochs_done, 2);
        let rest = continue_training(half.model, half.state, &seqs, &[], &cfg, cfg.epochs).unwrap();
        assert!(rest.model.params.bit_equal_on(&whole.model.params, &[""]).is_ok());
        let trace: Vec<f64> = half.log.iter().chain(&rest.log).map(|l| l.train.total).collect();
        let expected: Vec<f64> = whole.log.iter().map(|l| l.train.total).collect();
        assert_eq!(trace, expected);
    }
}
