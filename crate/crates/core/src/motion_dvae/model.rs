use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{gaussian_kl_node, reparam_node, standard_normal, GruCell, Graph, Mlp, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::kinematics::body::{PHI, PHI_DOT, R, R_DOT, THETA, THETA_DOT};
use crate::kinematics::{PoseState, RootFrame, STATE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvaeConfig {
    pub d_z: usize,
    /// Width of both recurrences.
    pub hidden: usize,
    /// Width of the initial-state embedding.
    pub embed: usize,
    /// Hidden width of the perceptron heads.
    pub mlp_hidden: usize,
    /// Added to every softplus variance.
    pub min_var: f64,
    pub seed: u64,
    /// Also integrate body joint angles from their decoded per-frame deltas
    /// (root position and orientation always are).
    #[serde(default)]
    pub integrate_body: bool,
}

impl Default for DvaeConfig {
    fn default() -> Self {
        Self {
            d_z: 48,
            hidden: 256,
            embed: 128,
            mlp_hidden: 256,
            min_var: 1e-6,
            seed: 0,
            integrate_body: false,
        }
    }
}

/// Standardization of the 138-dim state: per-feature means, and standard
/// deviations pooled within feature groups (see [`FeatureStats::GROUPS`]) so
/// that channels carrying only small jitter are not inflated to unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub const MIN_STD: f64 = 1e-3;

    /// Half-open index ranges sharing one standard deviation: each root
    /// translation axis and its delta on its own, then root orientation,
    /// its delta, body pose and its delta pooled.
    pub const GROUPS: [(usize, usize); 10] = [
        (R, R + 1),
        (R + 1, R + 2),
        (R + 2, R + 3),
        (R_DOT, R_DOT + 1),
        (R_DOT + 1, R_DOT + 2),
        (R_DOT + 2, R_DOT + 3),
        (PHI, PHI + 3),
        (PHI_DOT, PHI_DOT + 3),
        (THETA, THETA_DOT),
        (THETA_DOT, STATE_DIM),
    ];

    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; STATE_DIM],
            std: vec![1.0; STATE_DIM],
        }
    }

    pub fn fit<'a>(states: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut sum = vec![0.0; STATE_DIM];
        let mut sq = vec![0.0; STATE_DIM];
        let mut n = 0usize;
        for s in states {
            if s.len() != STATE_DIM {
                return Err(Error::Shape(format!("state needs {STATE_DIM} values, got {}", s.len())));
            }
            for i in 0..STATE_DIM {
                sum[i] += s[i];
                sq[i] += s[i] * s[i];
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Invalid("cannot fit feature statistics without data".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / n as f64 - m * m).max(0.0)).collect();
        let mut std = vec![0.0; STATE_DIM];
        for (lo, hi) in Self::GROUPS {
            let pooled = (var[lo..hi].iter().sum::<f64>() / (hi - lo) as f64).sqrt().max(Self::MIN_STD);
            std[lo..hi].iter_mut().for_each(|s| *s = pooled);
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }

    /// Recorded `x * std + mean` on a `batch x 138` node.
    pub fn denormalize_node(&self, g: &mut Graph, x: Var) -> Var {
        let std = g.constant(Tensor::row(self.std.clone()));
        let mean = g.constant(Tensor::row(self.mean.clone()));
        let scaled = g.mul_row(x, std);
        g.add_row(scaled, mean)
    }
}

/// Parameter names of the generative model and its encoder. Weights live in
/// an external [`ParamSet`] so the same network can run on merged or frozen
/// parameter sets.
#[derive(Clone, Debug)]
pub struct DvaeNet {
    pub d_z: usize,
    pub hidden: usize,
    pub min_var: f64,
    x0_embed: Mlp,
    z_rnn: GruCell,
    prior: Mlp,
    decoder: Mlp,
    enc_rnn: GruCell,
    enc_head: Mlp,
    integrator: Integrator,
}

/// Decoded positions that follow from the previous decoded frame plus the
/// decoded per-frame delta, as `(position column, delta column, width)`;
/// `scale`/`shift` map a standardized delta to standardized position units.
#[derive(Clone, Debug)]
struct Integrator {
    blocks: Vec<(usize, usize, usize)>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl Integrator {
    fn new(integrate_body: bool) -> Self {
        let mut blocks = vec![(R, R_DOT, 3), (PHI, PHI_DOT, 3)];
        if integrate_body {
            blocks.push((THETA, THETA_DOT, THETA_DOT - THETA));
        }
        Self {
            blocks,
            scale: vec![1.0; STATE_DIM],
            shift: vec![0.0; STATE_DIM],
        }
    }

    fn set_stats(&mut self, stats: &FeatureStats) {
        for &(pos, vel, n) in &self.blocks {
            for i in 0..n {
                self.scale[pos + i] = stats.std[vel + i] / stats.std[pos + i];
                self.shift[pos + i] = stats.mean[vel + i] / stats.std[pos + i];
            }
        }
    }
}

/// Prefixes of the generative (prior, decoder, shared recurrence, embedding)
/// parameters.
pub const GENERATIVE_PREFIXES: [&str; 4] = ["x0emb.", "zrnn.", "prior.", "dec."];
pub const ENCODER_PREFIX: &str = "enc.";

impl DvaeNet {
    pub fn build(config: &DvaeConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (h, e, m, dz) = (config.hidden, config.embed, config.mlp_hidden, config.d_z);
        let net = Self {
            d_z: dz,
            hidden: h,
            min_var: config.min_var,
            x0_embed: Mlp::init(params, "x0emb", STATE_DIM, m, e, rng)?,
            z_rnn: GruCell::init(params, "zrnn", dz, h, rng)?,
            prior: Mlp::init(params, "prior", h + e, m, 2 * dz, rng)?,
            decoder: Mlp::init(params, "dec", h + e, m, STATE_DIM, rng)?,
            enc_rnn: GruCell::init(params, "enc.rnn", STATE_DIM, h, rng)?,
            enc_head: Mlp::init(params, "enc.head", 2 * h + e, m, 2 * dz, rng)?,
            integrator: Integrator::new(config.integrate_body),
        };
        // start the residual decoder and the Gaussian heads close to zero
        net.decoder.output_layer().shrink(params, 0.1);
        net.prior.output_layer().shrink(params, 0.1);
        net.enc_head.output_layer().shrink(params, 0.1);
        Ok(net)
    }

    /// Match the integration of decoded deltas to a standardization.
    pub fn set_stats(&mut self, stats: &FeatureStats) {
        self.integrator.set_stats(stats);
    }

    pub fn embed(&self, g: &mut Graph, p: &ParamSet, x0n: Var) -> Var {
        let e = self.x0_embed.forward(g, p, x0n);
        g.tanh(e)
    }

    fn gaussian_head(&self, g: &mut Graph, p: &ParamSet, head: &Mlp, input: Var) -> (Var, Var) {
        let out = head.forward(g, p, input);
        let mu = g.slice_cols(out, 0, self.d_z);
        let raw = g.slice_cols(out, self.d_z, self.d_z);
        let var = g.softplus(raw);
        (mu, g.add_scalar(var, self.min_var))
    }

    /// `p(z_t | z_{1:t-1}, x0)` from the previous shared state.
    pub fn prior_step(&self, g: &mut Graph, p: &ParamSet, h_prev: Var, e: Var) -> (Var, Var) {
        let input = g.concat_cols(&[h_prev, e]);
        self.gaussian_head(g, p, &self.prior, input)
    }

    /// `q(z_t | z_{1:t-1}, x_{t:T}, x0)` from the backward state `g_t`.
    pub fn posterior_step(&self, g: &mut Graph, p: &ParamSet, g_t: Var, h_prev: Var, e: Var) -> (Var, Var) {
        let input = g.concat_cols(&[g_t, h_prev, e]);
        self.gaussian_head(g, p, &self.enc_head, input)
    }

    /// Standardized state mean, as a residual on the standardized `x0`;
    /// integrated positions instead add their decoded delta to `prev`, the
    /// previous decoded mean (`x0` itself at the first step).
    pub fn decode_step(&self, g: &mut Graph, p: &ParamSet, h_t: Var, e: Var, x0n: Var, prev: Var) -> Var {
        let input = g.concat_cols(&[h_t, e]);
        let delta = self.decoder.forward(g, p, input);
        let full = g.add(x0n, delta);
        let ig = &self.integrator;
        let mut parts = Vec::with_capacity(2 * ig.blocks.len() + 1);
        let mut col = 0;
        for &(pos, vel, n) in &ig.blocks {
            if pos > col {
                parts.push(g.slice_cols(full, col, pos - col));
            }
            let d = g.slice_cols(full, vel, n);
            let scale = g.constant(Tensor::row(ig.scale[pos..pos + n].to_vec()));
            let shift = g.constant(Tensor::row(ig.shift[pos..pos + n].to_vec()));
            let step = g.mul_row(d, scale);
            let step = g.add_row(step, shift);
            let before = g.slice_cols(prev, pos, n);
            parts.push(g.add(before, step));
            col = pos + n;
        }
        if col < STATE_DIM {
            parts.push(g.slice_cols(full, col, STATE_DIM - col));
        }
        g.concat_cols(&parts)
    }

    /// Shared forward recurrence over z.
    pub fn advance(&self, g: &mut Graph, p: &ParamSet, z: Var, h: Var) -> Var {
        self.z_rnn.forward(g, p, z, h)
    }

    /// Backward recurrence over standardized inputs; element `t` summarizes
    /// `xs[t..]`.
    pub fn encoder_states(&self, g: &mut Graph, p: &ParamSet, xs: &[Var]) -> Vec<Var> {
        if xs.is_empty() {
            return Vec::new();
        }
        let rows = g.value(xs[0]).rows();
        let mut state = g.constant(Tensor::zeros(&[rows, self.hidden]));
        let mut out = vec![state; xs.len()];
        for t in (0..xs.len()).rev() {
            state = self.enc_rnn.forward(g, p, xs[t], state);
            out[t] = state;
        }
        out
    }

    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> Var {
        g.constant(Tensor::zeros(&[rows, self.hidden]))
    }

    /// Sample z from the posterior at every step (one `eps` per step) and
    /// decode. `eps[t]` is `rows x d_z`.
    pub fn unroll_posterior(&self, g: &mut Graph, p: &ParamSet, x0n: Var, e: Var, g_states: &[Var], eps: &[Tensor]) -> Unroll {
        let rows = g.value(x0n).rows();
        let mut h = self.zero_state(g, rows);
        let mut out = Unroll::default();
        for (t, &g_t) in g_states.iter().enumerate() {
            let (mu_p, var_p) = self.prior_step(g, p, h, e);
            let (mu_q, var_q) = self.posterior_step(g, p, g_t, h, e);
            let kl = gaussian_kl_node(g, mu_q, var_q, mu_p, var_p);
            out.kl = Some(match out.kl {
                Some(acc) => g.add(acc, kl),
                None => kl,
            });
            let z = reparam_node(g, mu_q, var_q, &eps[t]);
            out.h_prev.push(h);
            h = self.advance(g, p, z, h);
            let prev = out.x_mu.last().copied().unwrap_or(x0n);
            out.x_mu.push(self.decode_step(g, p, h, e, x0n, prev));
            out.h.push(h);
            out.z.push(z);
            out.q.push((mu_q, var_q));
            out.p.push((mu_p, var_p));
        }
        out
    }
}

/// Nodes of one posterior rollout.
#[derive(Default)]
pub struct Unroll {
    /// Standardized decoded means for steps 1..T.
    pub x_mu: Vec<Var>,
    /// Shared state after consuming z_t.
    pub h: Vec<Var>,
    /// Shared state before z_t.
    pub h_prev: Vec<Var>,
    pub z: Vec<Var>,
    pub q: Vec<(Var, Var)>,
    pub p: Vec<(Var, Var)>,
    /// Sum of the per-step KL terms (None for T = 0).
    pub kl: Option<Var>,
}

/// Latent trajectory with the per-step posterior and prior parameters, all
/// `T x d_z`.
#[derive(Clone, Debug)]
pub struct LatentSeq {
    pub z: Tensor,
    pub mu_q: Tensor,
    pub var_q: Tensor,
    pub mu_p: Tensor,
    pub var_p: Tensor,
}

impl LatentSeq {
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const CHECKPOINT_KIND: &str = "motion_dvae";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    kind: String,
    config: DvaeConfig,
    stats: FeatureStats,
    trained: bool,
    params: ParamSet,
}

/// Generative motion model with its encoder.
#[derive(Clone, Debug)]
pub struct DvaeModel {
    pub config: DvaeConfig,
    pub stats: FeatureStats,
    pub params: ParamSet,
    pub trained: bool,
    pub net: DvaeNet,
}

fn stack_rows(rows: &[Vec<f64>], cols: usize) -> Tensor {
    let values: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::matrix(rows.len(), cols, values).expect("row lengths")
}

impl DvaeModel {
    pub fn new(config: DvaeConfig, stats: FeatureStats) -> Result<Self> {
        if config.d_z == 0 || config.hidden == 0 || config.embed == 0 || config.mlp_hidden == 0 {
            return Err(Error::Invalid("network sizes must be positive".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net = DvaeNet::build(&config, &mut params, &mut rng)?;
        if stats.mean.len() != STATE_DIM || stats.std.len() != STATE_DIM {
            return Err(Error::Shape("feature statistics must have 138 entries".into()));
        }
        net.set_stats(&stats);
        Ok(Self {
            config,
            stats,
            params,
            trained: false,
            net,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format_version: crate::diffmath::params::CHECKPOINT_FORMAT_VERSION,
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            stats: self.stats.clone(),
            trained: self.trained,
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::parse(&origin, format!("line {}: {e}", e.line())))?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::parse(origin, format!("expected a {CHECKPOINT_KIND} checkpoint, found `{}`", ck.kind)));
        }
        Self::from_parts(ck.config, ck.stats, ck.params, ck.trained).map_err(|e| Error::parse(origin, e.to_string()))
    }

    /// Rebuild from stored pieces, checking every parameter name and shape.
    pub fn from_parts(config: DvaeConfig, stats: FeatureStats, params: ParamSet, trained: bool) -> Result<Self> {
        let mut model = Self::new(config, stats)?;
        for (name, t) in model.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Shape(format!("parameter `{name}` has shape {:?}, expected {:?}", p.shape(), t.shape())))
                }
                None => return Err(Error::Invalid(format!("checkpoint lacks parameter `{name}`"))),
            }
        }
        if params.len() != model.params.len() {
            return Err(Error::Invalid("checkpoint has unexpected extra parameters".into()));
        }
        model.params = params;
        model.trained = trained;
        Ok(model)
    }

    /// Standardize a state already expressed in its window's root frame.
    pub fn normalize_state(&self, s: &PoseState) -> Vec<f64> {
        self.stats.normalize(&s.to_vec())
    }

    /// Embedding of the initial state (in its own root frame), `1 x embed`.
    pub fn embed_x0(&self, x0: &PoseState) -> Tensor {
        let mut g = Graph::new();
        let (x0n, _) = self.local_inputs(&mut g, x0, &[]);
        let e = self.net.embed(&mut g, &self.params, x0n);
        g.value(e).clone()
    }

    /// Prior Gaussian for the next latent given the shared state before it.
    pub fn prior_step(&self, h_prev: &Tensor, x0_embed: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let h = g.constant(h_prev.clone());
        let e = g.constant(x0_embed.clone());
        let (mu, var) = self.net.prior_step(&mut g, &self.params, h, e);
        (g.value(mu).clone(), g.value(var).clone())
    }

    /// Decoded world-frame state mean after consuming `z_{1:t}`
    /// (summarized by `h_t`), following the decoded mean `prev` of step
    /// `t - 1` (`x0` at the first step).
    pub fn decode_step(&self, h_t: &Tensor, x0_embed: &Tensor, x0: &PoseState, prev: &PoseState) -> Result<PoseState> {
        let mut g = Graph::new();
        let h = g.constant(h_t.clone());
        let e = g.constant(x0_embed.clone());
        let (x0n, prev) = self.local_inputs(&mut g, x0, std::slice::from_ref(prev));
        let mu = self.net.decode_step(&mut g, &self.params, h, e, x0n, prev[0]);
        self.world_state(&RootFrame::of(x0), &g, mu)
    }

    /// Advance the shared recurrence by one latent.
    pub fn advance(&self, z: &Tensor, h: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (z, h) = (g.constant(z.clone()), g.constant(h.clone()));
        let out = self.net.advance(&mut g, &self.params, z, h);
        g.value(out).clone()
    }

    pub fn zero_hidden(&self) -> Tensor {
        Tensor::zeros(&[1, self.config.hidden])
    }

    /// Standardized `x0` and frames, in the root frame of `x0`, as graph
    /// constants.
    fn local_inputs(&self, g: &mut Graph, x0: &PoseState, x_seq: &[PoseState]) -> (Var, Vec<Var>) {
        let f = RootFrame::of(x0);
        let x0n = g.constant(Tensor::row(self.normalize_state(&f.state_to_local(x0))));
        let xs = x_seq
            .iter()
            .map(|s| g.constant(Tensor::row(self.normalize_state(&f.state_to_local(s)))))
            .collect();
        (x0n, xs)
    }

    fn world_state(&self, frame: &RootFrame, g: &Graph, x: Var) -> Result<PoseState> {
        let local = PoseState::from_slice(&self.stats.denormalize(g.value(x).values()))?;
        Ok(frame.state_to_world(&local))
    }

    /// Posterior rollout over `x_seq` (frames 1..T) given `x0`.
    pub fn encode_sequence(&self, x_seq: &[PoseState], x0: &PoseState, seed: u64) -> Result<LatentSeq> {
        if x_seq.is_empty() {
            return Err(Error::Invalid("encode_sequence needs at least one frame".into()));
        }
        let mut g = Graph::new();
        let p = &self.params;
        let (x0n, xs) = self.local_inputs(&mut g, x0, x_seq);
        let e = self.net.embed(&mut g, p, x0n);
        let gs = self.net.encoder_states(&mut g, p, &xs);
        let eps = step_noise(seed, x_seq.len(), 1, self.config.d_z);
        let un = self.net.unroll_posterior(&mut g, p, x0n, e, &gs, &eps);
        let collect = |g: &Graph, vs: &[Var]| stack_rows(&vs.iter().map(|v| g.value(*v).values().to_vec()).collect::<Vec<_>>(), self.config.d_z);
        let mu_q: Vec<Var> = un.q.iter().map(|q| q.0).collect();
        let var_q: Vec<Var> = un.q.iter().map(|q| q.1).collect();
        let mu_p: Vec<Var> = un.p.iter().map(|q| q.0).collect();
        let var_p: Vec<Var> = un.p.iter().map(|q| q.1).collect();
        Ok(LatentSeq {
            z: collect(&g, &un.z),
            mu_q: collect(&g, &mu_q),
            var_q: collect(&g, &var_q),
            mu_p: collect(&g, &mu_p),
            var_p: collect(&g, &var_p),
        })
    }

    /// Posterior parameters at each step with the latent history fixed to the
    /// rows of `z` (teacher forcing): step t sees `z[..t]`.
    pub fn posterior_given_latents(&self, x_seq: &[PoseState], x0: &PoseState, z: &Tensor) -> Result<(Tensor, Tensor)> {
        if z.rows() != x_seq.len() || z.cols() != self.config.d_z {
            return Err(Error::Shape(format!("latents must be {} x {}", x_seq.len(), self.config.d_z)));
        }
        let mut g = Graph::new();
        let p = &self.params;
        let (x0n, xs) = self.local_inputs(&mut g, x0, x_seq);
        let e = self.net.embed(&mut g, p, x0n);
        let gs = self.net.encoder_states(&mut g, p, &xs);
        let mut h = self.net.zero_state(&mut g, 1);
        let (mut mus, mut vars) = (Vec::new(), Vec::new());
        for (t, &g_t) in gs.iter().enumerate() {
            let (mu, var) = self.net.posterior_step(&mut g, p, g_t, h, e);
            mus.push(g.value(mu).values().to_vec());
            vars.push(g.value(var).values().to_vec());
            let zt = g.constant(Tensor::row(z.row_slice(t).to_vec()));
            h = self.net.advance(&mut g, p, zt, h);
        }
        Ok((stack_rows(&mus, self.config.d_z), stack_rows(&vars, self.config.d_z)))
    }

    /// Decoded states for an explicit latent trajectory (rows of `z`).
    pub fn decode_latents(&self, x0: &PoseState, z: &Tensor) -> Result<Vec<PoseState>> {
        if z.cols() != self.config.d_z {
            return Err(Error::Shape(format!("latents must have {} columns", self.config.d_z)));
        }
        let frame = RootFrame::of(x0);
        let mut g = Graph::new();
        let p = &self.params;
        let (x0n, _) = self.local_inputs(&mut g, x0, &[]);
        let e = self.net.embed(&mut g, p, x0n);
        let mut h = self.net.zero_state(&mut g, 1);
        let mut out = Vec::with_capacity(z.rows());
        let mut prev = x0n;
        for t in 0..z.rows() {
            let zt = g.constant(Tensor::row(z.row_slice(t).to_vec()));
            h = self.net.advance(&mut g, p, zt, h);
            prev = self.net.decode_step(&mut g, p, h, e, x0n, prev);
            out.push(self.world_state(&frame, &g, prev)?);
        }
        Ok(out)
    }

    /// Ancestral sampling from the prior. Decoded states are never fed back;
    /// `prior_scale` multiplies the prior standard deviation (0 gives the
    /// deterministic mean rollout).
    pub fn generate(&self, x0: &PoseState, steps: usize, seed: u64, prior_scale: f64) -> Result<Vec<PoseState>> {
        if !(prior_scale >= 0.0) {
            return Err(Error::Domain(format!("prior_scale must be non-negative, got {prior_scale}")));
        }
        let frame = RootFrame::of(x0);
        let mut g = Graph::new();
        let p = &self.params;
        let (x0n, _) = self.local_inputs(&mut g, x0, &[]);
        let e = self.net.embed(&mut g, p, x0n);
        let mut h = self.net.zero_state(&mut g, 1);
        let eps = step_noise(seed, steps, 1, self.config.d_z);
        let mut out = Vec::with_capacity(steps);
        let mut prev = x0n;
        for eps_t in eps.iter() {
            let (mu, var) = self.net.prior_step(&mut g, p, h, e);
            let scaled = eps_t.map(|v| v * prior_scale);
            let z = reparam_node(&mut g, mu, var, &scaled);
            h = self.net.advance(&mut g, p, z, h);
            prev = self.net.decode_step(&mut g, p, h, e, x0n, prev);
            let state = self.world_state(&frame, &g, prev)?;
            if !state.is_finite() {
                return Err(Error::NonFinite {
                    step: out.len(),
                    detail: "generated state is not finite".into(),
                });
            }
            out.push(state);
        }
        Ok(out)
    }
}

/// Independent standard-normal draws per step, `rows x dim` each.
pub fn step_noise(seed: u64, steps: usize, rows: usize, dim: usize) -> Vec<Tensor> {
    (0..steps)
        .map(|t| standard_normal(&[rows, dim], crate::diffmath::step_seed(seed, t as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_motion, MotionKind};
    use crate::kinematics::BodyShape;

    fn toy() -> DvaeModel {
        let config = DvaeConfig {
            d_z: 4,
            hidden: 8,
            embed: 6,
            mlp_hidden: 8,
            seed: 5,
            integrate_body: false,
            ..Default::default()
        };
        DvaeModel::new(config, FeatureStats::identity()).unwrap()
    }

    fn states(n: usize) -> (PoseState, Vec<PoseState>) {
        let seq = generate_motion(MotionKind::Wave, n as f64 / 30.0, 30.0, &BodyShape::default(), 2).unwrap();
        let mut s = seq.states().unwrap();
        let x0 = s.remove(0);
        (x0, s)
    }

    fn latents(rows: usize, d: usize, seed: u64) -> Tensor {
        standard_normal(&[rows, d], seed)
    }

    fn perturbed_row(z: &Tensor, row: usize, by: f64) -> Tensor {
        let mut z = z.clone();
        let d = z.cols();
        z.values_mut()[row * d..(row + 1) * d].iter_mut().for_each(|v| *v += by);
        z
    }

    #[test]
    fn decoder_is_causal_in_latents() {
        let m = toy();
        let (x0, _) = states(8);
        let z = latents(6, 4, 1);
        let base = m.decode_latents(&x0, &z).unwrap();
        let moved = m.decode_latents(&x0, &perturbed_row(&z, 3, 0.5)).unwrap();
        for t in 0..3 {
            assert_eq!(base[t], moved[t], "frame {t} saw a future latent");
        }
        assert_ne!(base[3], moved[3]);
    }

    #[test]
    fn prior_depends_on_the_latent_history() {
        let m = toy();
        let (x0, _) = states(2);
        let e = m.embed_x0(&x0);
        let roll = |z: &Tensor| {
            let mut h = m.zero_hidden();
            for t in 0..z.rows() {
                h = m.advance(&Tensor::row(z.row_slice(t).to_vec()), &h);
            }
            m.prior_step(&h, &e)
        };
        let a = roll(&latents(3, 4, 1));
        let b = roll(&latents(3, 4, 2));
        assert_ne!(a.0, b.0);
        assert_ne!(a.1, b.1);
    }

    #[test]
    fn encoder_ignores_the_past_and_sees_the_future() {
        let m = toy();
        let (x0, xs) = states(8);
        let z = latents(xs.len(), 4, 2);
        let (mu, var) = m.posterior_given_latents(&xs, &x0, &z).unwrap();
        assert!(var.values().iter().all(|v| *v > 0.0));

        let mut past = xs.clone();
        past[1].r[0] += 0.3;
        let (mu_past, _) = m.posterior_given_latents(&past, &x0, &z).unwrap();
        for t in 2..xs.len() {
            assert_eq!(mu.row_slice(t), mu_past.row_slice(t), "step {t} saw an earlier frame");
        }

        let mut future = xs.clone();
        future.last_mut().unwrap().theta[4][1] += 0.3;
        let (mu_future, _) = m.posterior_given_latents(&future, &x0, &z).unwrap();
        assert_ne!(mu.row_slice(0), mu_future.row_slice(0));
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let m = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.json");
        m.save(&path).unwrap();
        let back = DvaeModel::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert!(back.params.bit_equal_on(&m.params, &[""]).is_ok());
        let (x0, _) = states(3);
        assert_eq!(back.generate(&x0, 4, 9, 1.0).unwrap(), m.generate(&x0, 4, 9, 1.0).unwrap());
    }

    #[test]
    fn checkpoint_of_another_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"format_version":1,"kind":"other"}"#).unwrap();
        assert!(DvaeModel::load(&path).is_err());
    }

    #[test]
    fn generation_is_seeded_and_scale_zero_is_deterministic() {
        let m = toy();
        let (x0, _) = states(3);
        let a = m.generate(&x0, 5, 1, 1.0).unwrap();
        assert_eq!(a, m.generate(&x0, 5, 1, 1.0).unwrap());
        assert_ne!(a, m.generate(&x0, 5, 2, 1.0).unwrap());
        assert_eq!(m.generate(&x0, 5, 1, 0.0).unwrap(), m.generate(&x0, 5, 2, 0.0).unwrap());
        assert!(m.generate(&x0, 5, 1, -1.0).is_err());
    }

    #[test]
    fn encoded_variances_are_positive() {
        let m = toy();
        let (x0, xs) = states(6);
        let l = m.encode_sequence(&xs, &x0, 4).unwrap();
        assert_eq!(l.len(), xs.len());
        assert!(l.var_q.values().iter().chain(l.var_p.values()).all(|v| *v >= m.config.min_var));
    }
}
