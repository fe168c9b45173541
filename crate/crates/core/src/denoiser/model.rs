use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MotionSequence;
use crate::diffmath::params::CHECKPOINT_FORMAT_VERSION;
use crate::diffmath::{GruCell, Graph, Mlp, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::kinematics::{
    forward_kinematics, BodyShape, Observation3D, PoseState, RootFrame, NUM_BETAS, OBS_DIM, STATE_DIM,
};
use crate::motion_dvae::{DvaeConfig, DvaeModel, DvaeNet, FeatureStats, GENERATIVE_PREFIXES};
use crate::noise_model::IGParams;

/// Architecture and likelihood scale of the inference networks added for
/// denoising.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Hidden size of the initial-state predictor's backward recurrence.
    pub omega_hidden: usize,
    /// Hidden width of the noise predictor.
    pub gamma_hidden: usize,
    /// Length (m) of one unit of observation noise: variances `v` are in
    /// units of `obs_unit^2`.
    pub obs_unit: f64,
    pub min_var: f64,
    /// Sequences longer than this are denoised in consecutive windows.
    pub window_len: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            omega_hidden: 128,
            gamma_hidden: 64,
            obs_unit: 0.05,
            min_var: 1e-6,
            window_len: 60,
            seed: 1,
        }
    }
}

/// A noisy sequence: raw parameters, the derived states and 3D points of
/// every frame, and the shape estimate.
#[derive(Clone, Debug)]
pub struct NoisyObservationSeq {
    pub y_raw: MotionSequence,
    pub states: Vec<PoseState>,
    pub y3d: Vec<Observation3D>,
    pub shape: BodyShape,
}

impl NoisyObservationSeq {
    pub fn new(y_raw: MotionSequence) -> Result<Self> {
        let shape = y_raw.betas;
        Self::build(y_raw, shape)
    }

    /// Shape is the average of per-frame estimates.
    pub fn with_frame_shapes(mut y_raw: MotionSequence, shapes: &[BodyShape]) -> Result<Self> {
        if shapes.len() != y_raw.len() {
            return Err(Error::Shape(format!("{} shape estimates for {} frames", shapes.len(), y_raw.len())));
        }
        let mut betas = [0.0; NUM_BETAS];
        for s in shapes {
            betas.iter_mut().zip(&s.betas).for_each(|(b, v)| *b += v / shapes.len() as f64);
        }
        y_raw.betas = BodyShape::new(betas);
        Self::build(y_raw, BodyShape::new(betas))
    }

    fn build(y_raw: MotionSequence, shape: BodyShape) -> Result<Self> {
        if y_raw.len() < 2 {
            return Err(Error::Invalid(format!("a noisy sequence needs at least 2 frames, got {}", y_raw.len())));
        }
        let states = y_raw.states()?;
        let y3d = states.iter().map(|s| forward_kinematics(s, &shape)).collect();
        Ok(Self {
            y_raw,
            states,
            y3d,
            shape,
        })
    }

    /// Number of frames, `T + 1`.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Frames `start..start + len` (velocities kept from the full sequence).
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.len());
        Self {
            y_raw: MotionSequence {
                frames: self.y_raw.frames[start..end].to_vec(),
                ..self.y_raw.clone()
            },
            states: self.states[start..end].to_vec(),
            y3d: self.y3d[start..end].to_vec(),
            shape: self.shape,
        }
    }

    /// Consecutive windows of at most `len` frames covering the sequence; a
    /// trailing single frame joins the previous window.
    pub fn windows(&self, len: usize) -> Vec<(usize, Self)> {
        let len = len.max(2);
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.len() {
            let mut take = len.min(self.len() - start);
            if self.len() - (start + take) == 1 {
                take += 1;
            }
            out.push((start, self.slice(start, take)));
            start += take;
        }
        out
    }

    /// Root frame used for modeling: that of the first noisy state.
    pub fn frame(&self) -> RootFrame {
        RootFrame::of(&self.states[0])
    }
}

/// Gaussian over `x0` and Inverse-Gamma parameters, all standardized/unit
/// scaled as used inside the graph.
pub(crate) struct InferenceNets {
    pub omega_rnn: GruCell,
    pub omega_head: Mlp,
    pub gamma: Mlp,
}

pub const OMEGA_PREFIX: &str = "omega.";
pub const GAMMA_PREFIX: &str = "gamma.";
pub const CHECKPOINT_KIND: &str = "motion_dvae_denoiser";

/// Motion-DVAE plus the initial-state and noise predictors. The generative
/// parameters are frozen inside `params`.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub dvae_config: DvaeConfig,
    pub stats: FeatureStats,
    pub config: DenoiserConfig,
    /// Confidence prior `IG(lambda/2, lambda/2)` on every noise variance.
    pub lambda: f64,
    pub params: ParamSet,
    pub trained: bool,
    pub net: DvaeNet,
    pub(crate) nets: std::sync::Arc<InferenceNets>,
}

impl std::fmt::Debug for InferenceNets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("InferenceNets")
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    kind: String,
    dvae_config: DvaeConfig,
    stats: FeatureStats,
    config: DenoiserConfig,
    lambda: f64,
    trained: bool,
    params: ParamSet,
}

fn build_nets(dvae: &DvaeConfig, config: &DenoiserConfig, params: &mut ParamSet) -> Result<InferenceNets> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let omega_rnn = GruCell::init(params, "omega.rnn", STATE_DIM, config.omega_hidden, &mut rng)?;
    let omega_head = Mlp::init(params, "omega.head", config.omega_hidden, config.omega_hidden, 2 * STATE_DIM, &mut rng)?;
    let gamma = Mlp::init(params, "gamma", 2 * OBS_DIM + dvae.hidden + dvae.embed, config.gamma_hidden, 2 * OBS_DIM, &mut rng)?;
    omega_head.output_layer().shrink(params, 0.1);
    // zero output: the noise posterior starts at the prior
    gamma.output_layer().shrink(params, 0.0);
    Ok(InferenceNets {
        omega_rnn,
        omega_head,
        gamma,
    })
}

impl DenoiserModel {
    /// Fresh inference networks on top of a trained prior; the prior's
    /// encoder initializes the posterior network.
    pub fn from_prior(prior: &DvaeModel, config: DenoiserConfig, lambda: f64) -> Result<Self> {
        if !prior.trained {
            return Err(Error::Untrained("the motion prior has not been trained".into()));
        }
        IGParams::prior(lambda)?;
        if !(config.obs_unit > 0.0) || config.omega_hidden == 0 || config.gamma_hidden == 0 {
            return Err(Error::Invalid("denoiser sizes and obs_unit must be positive".into()));
        }
        let mut params = prior.params.clone();
        params.unfreeze_all();
        let nets = build_nets(&prior.config, &config, &mut params)?;
        params.freeze_prefixes(&GENERATIVE_PREFIXES);
        Ok(Self {
            dvae_config: prior.config.clone(),
            stats: prior.stats.clone(),
            config,
            lambda,
            params,
            trained: false,
            net: prior.net.clone(),
            nets: std::sync::Arc::new(nets),
        })
    }

    pub fn noise_prior(&self) -> IGParams {
        IGParams::prior(self.lambda).expect("lambda validated at construction")
    }

    /// Check that the generative weights equal those of `prior` bit for bit.
    pub fn check_frozen(&self, prior: &DvaeModel) -> Result<()> {
        self.params
            .bit_equal_on(&prior.params, &GENERATIVE_PREFIXES)
            .map_err(Error::FrozenDrift)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: CHECKPOINT_KIND.into(),
            dvae_config: self.dvae_config.clone(),
            stats: self.stats.clone(),
            config: self.config.clone(),
            lambda: self.lambda,
            trained: self.trained,
            params: self.params.clone(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(&ck).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::parse(
                path.display().to_string(),
                format!("expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`", ck.kind),
            ));
        }
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unsupported checkpoint format version {}", ck.format_version),
            ));
        }
        IGParams::prior(ck.lambda)?;
        // rebuild the architecture and check every tensor against it
        let mut layout = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(ck.dvae_config.seed);
        let mut net = DvaeNet::build(&ck.dvae_config, &mut layout, &mut rng)?;
        net.set_stats(&ck.stats);
        let nets = build_nets(&ck.dvae_config, &ck.config, &mut layout)?;
        if layout.len() != ck.params.len() {
            return Err(Error::parse(path.display().to_string(), "parameter set does not match the architecture"));
        }
        for (name, t) in layout.iter() {
            match ck.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::parse(
                        path.display().to_string(),
                        format!("parameter `{name}` is missing or has the wrong shape"),
                    ))
                }
            }
        }
        let mut params = ck.params;
        params.unfreeze_all();
        params.freeze_prefixes(&GENERATIVE_PREFIXES);
        Ok(Self {
            dvae_config: ck.dvae_config,
            stats: ck.stats,
            config: ck.config,
            lambda: ck.lambda,
            params,
            trained: ck.trained,
            net,
            nets: std::sync::Arc::new(nets),
        })
    }

    /// The generative model (and current encoder) as a standalone prior.
    pub fn dvae(&self) -> Result<DvaeModel> {
        let mut p = ParamSet::new();
        for (name, t) in self.params.iter() {
            if !name.starts_with(OMEGA_PREFIX) && !name.starts_with(GAMMA_PREFIX) {
                p.insert(name, t.clone())?;
            }
        }
        DvaeModel::from_parts(self.dvae_config.clone(), self.stats.clone(), p, true)
    }

    /// Backward recurrence over all standardized states, pooled into a
    /// Gaussian over the standardized `x0` (mean as a residual on the first
    /// observation). Rows are independent sequences.
    pub(crate) fn omega_graph(&self, g: &mut Graph, p: &ParamSet, states: &[Var]) -> (Var, Var) {
        let rows = g.value(states[0]).rows();
        let mut h = g.constant(Tensor::zeros(&[rows, self.config.omega_hidden]));
        for &x in states.iter().rev() {
            h = self.nets.omega_rnn.forward(g, p, x, h);
        }
        let out = self.nets.omega_head.forward(g, p, h);
        let delta = g.slice_cols(out, 0, STATE_DIM);
        let mu = g.add(states[0], delta);
        let raw = g.slice_cols(out, STATE_DIM, STATE_DIM);
        let var = g.softplus(raw);
        (mu, g.add_scalar(var, self.config.min_var))
    }

    /// Inverse-Gamma shape and scale per observed coordinate. `h` is the
    /// shared z-recurrence state (zeros before any latent), `resid` the
    /// observation minus the model's points in `obs_unit`s, `y` the local
    /// observation in meters.
    pub(crate) fn gamma_graph(&self, g: &mut Graph, p: &ParamSet, h: Var, y: Var, resid: Var, e: Var) -> (Var, Var) {
        let input = g.concat_cols(&[resid, y, h, e]);
        let out = self.nets.gamma.forward(g, p, input);
        // zero output is the prior; the input scale keeps the KL to the
        // prior O(out^2) whatever the prior's confidence
        let scale = 0.5 * self.lambda / std::f64::consts::LN_2;
        let shrink = 1.0 / (1.0 + 0.5 * self.lambda).sqrt();
        let oa = g.slice_cols(out, 0, OBS_DIM);
        let ob = g.slice_cols(out, OBS_DIM, OBS_DIM);
        let oa = g.scale(oa, shrink);
        let ob = g.scale(ob, shrink);
        let a = g.softplus(oa);
        let b = g.softplus(ob);
        (g.scale(a, scale), g.scale(b, scale))
    }
}
