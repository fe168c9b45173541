//! Procedural clean-motion corpora, noisy twins and the motion file format.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diffmath::step_seed;
use crate::error::{Error, Result};
use crate::kinematics::{
    compute_velocities, forward_kinematics_with, inject_pose_noise, shape_to_bone_scales, BodyShape, KinematicTree,
    Observation3D, PoseState, RawPose, Vec3, NUM_BETAS, NUM_BODY_JOINTS,
};
use crate::metrics_eval::v2v;

pub const DEFAULT_FPS: f64 = 30.0;
pub const MAX_JOINT_ANGLE: f64 = 2.5;

/// A timed sequence of raw body parameters plus the body shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub fps: f64,
    pub betas: BodyShape,
    pub frames: Vec<RawPose>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn states(&self) -> Result<Vec<PoseState>> {
        compute_velocities(&self.frames, self.fps)
    }

    pub fn observations(&self) -> Vec<Observation3D> {
        let tree = KinematicTree::mini_body();
        let scales = shape_to_bone_scales(&self.betas);
        self.frames
            .iter()
            .map(|f| {
                let s = PoseState {
                    r: f.r,
                    phi: f.phi,
                    theta: f.theta,
                    ..Default::default()
                };
                forward_kinematics_with(tree, &s, &scales)
            })
            .collect()
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<MotionSequence> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Invalid(format!(
                "window {start}..{} outside a {}-frame sequence",
                start + len,
                self.len()
            )));
        }
        Ok(MotionSequence {
            fps: self.fps,
            betas: self.betas,
            frames: self.frames[start..start + len].to_vec(),
        })
    }

    /// Consecutive windows of `len` frames with the given stride.
    pub fn windows(&self, len: usize, stride: usize) -> Vec<MotionSequence> {
        let stride = stride.max(1);
        let mut out = Vec::new();
        let mut start = 0;
        while start + len <= self.len() && len > 0 {
            out.push(self.window(start, len).expect("in range"));
            start += stride;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Walk,
    Wave,
    Squat,
    SmoothRandom,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [MotionKind::Walk, MotionKind::Wave, MotionKind::Squat, MotionKind::SmoothRandom];

    pub fn name(&self) -> &'static str {
        match self {
            MotionKind::Walk => "walk",
            MotionKind::Wave => "wave",
            MotionKind::Squat => "squat",
            MotionKind::SmoothRandom => "smooth_random",
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = MotionKind::ALL.iter().map(|k| k.name()).collect();
            Error::Invalid(format!("unknown motion kind `{s}`; valid kinds: {}", valid.join(", ")))
        })
    }
}

// body-joint slots in `theta` (joint index minus one)
const L_HIP: usize = 0;
const R_HIP: usize = 1;
const SPINE1: usize = 2;
const L_KNEE: usize = 3;
const R_KNEE: usize = 4;
const SPINE2: usize = 5;
const L_ANKLE: usize = 6;
const R_ANKLE: usize = 7;
const NECK: usize = 11;
const L_SHOULDER: usize = 15;
const R_SHOULDER: usize = 16;
const L_ELBOW: usize = 17;
const R_ELBOW: usize = 18;

/// Arms hanging at the sides.
const ARMS_DOWN: f64 = 1.2;

/// White noise smoothed by a Gaussian kernel and rescaled to `std`.
fn smooth_noise(n: usize, width: f64, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pad = (3.0 * width).ceil() as usize;
    let raw: Vec<f64> = (0..n + 2 * pad).map(|_| rng.sample(StandardNormal)).collect();
    let kernel: Vec<f64> = (0..=2 * pad)
        .map(|i| {
            let d = i as f64 - pad as f64;
            (-0.5 * d * d / (width * width)).exp()
        })
        .collect();
    let norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    (0..n)
        .map(|t| std * kernel.iter().enumerate().map(|(i, k)| k * raw[t + i]).sum::<f64>() / norm)
        .collect()
}

struct Builder {
    frames: Vec<RawPose>,
}

impl Builder {
    fn new(n: usize) -> Self {
        let mut rest = RawPose::default();
        rest.theta[L_SHOULDER][2] = -ARMS_DOWN;
        rest.theta[R_SHOULDER][2] = ARMS_DOWN;
        Self { frames: vec![rest; n] }
    }

    /// Low-amplitude smooth motion on every body joint.
    fn idle(&mut self, amplitude: f64, rng: &mut ChaCha8Rng) {
        let n = self.frames.len();
        for j in 0..NUM_BODY_JOINTS {
            for c in 0..3 {
                let wobble = smooth_noise(n, 8.0, amplitude, rng);
                for (f, w) in self.frames.iter_mut().zip(wobble) {
                    f.theta[j][c] += w;
                }
            }
        }
    }

    fn finish(mut self) -> Vec<RawPose> {
        for f in &mut self.frames {
            f.theta.iter_mut().flatten().for_each(|v| *v = v.clamp(-MAX_JOINT_ANGLE, MAX_JOINT_ANGLE));
        }
        self.frames
    }
}

fn placement(rng: &mut ChaCha8Rng) -> (f64, Vec3) {
    let yaw = rng.gen_range(-PI..PI);
    (yaw, [rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-1.0..1.0)])
}

fn walk(n: usize, fps: f64, rng: &mut ChaCha8Rng) -> Vec<RawPose> {
    let mut b = Builder::new(n);
    let (yaw, start) = placement(rng);
    let freq = rng.gen_range(0.8..1.1);
    let stride = rng.gen_range(1.0..1.4);
    let hip = rng.gen_range(0.3..0.5);
    let knee = rng.gen_range(0.5..0.8);
    let arm = rng.gen_range(0.15..0.35);
    let phase = rng.gen_range(0.0..TAU);
    let speed = stride * freq;
    let (fx, fz) = (yaw.sin(), yaw.cos());
    for (t, f) in b.frames.iter_mut().enumerate() {
        let time = t as f64 / fps;
        let w = TAU * freq * time + phase;
        let d = speed * time;
        f.r = [start[0] + fx * d, 0.015 * (2.0 * w).cos(), start[2] + fz * d];
        f.phi = [0.0, yaw + 0.05 * w.sin(), 0.0];
        f.theta[L_HIP][0] = -hip * w.sin();
        f.theta[R_HIP][0] = hip * w.sin();
        f.theta[L_KNEE][0] = knee * 0.5 * (1.0 + (w - 1.2).cos());
        f.theta[R_KNEE][0] = knee * 0.5 * (1.0 - (w - 1.2).cos());
        f.theta[L_ANKLE][0] = -0.15 * (w - 0.6).sin();
        f.theta[R_ANKLE][0] = 0.15 * (w - 0.6).sin();
        f.theta[L_SHOULDER][0] = arm * w.sin();
        f.theta[R_SHOULDER][0] = -arm * w.sin();
        f.theta[L_ELBOW][1] = -0.2 - 0.1 * w.sin();
        f.theta[R_ELBOW][1] = 0.2 - 0.1 * w.sin();
        f.theta[SPINE1][1] = 0.05 * w.sin();
    }
    b.idle(0.02, rng);
    b.finish()
}

fn wave(n: usize, fps: f64, rng: &mut ChaCha8Rng) -> Vec<RawPose> {
    let mut b = Builder::new(n);
    let (yaw, start) = placement(rng);
    let freq = rng.gen_range(1.0..2.0);
    let swing = rng.gen_range(0.3..0.5);
    let raise = rng.gen_range(0.2..0.6);
    let phase = rng.gen_range(0.0..TAU);
    let left = rng.gen_bool(0.5);
    for (t, f) in b.frames.iter_mut().enumerate() {
        let w = TAU * freq * t as f64 / fps + phase;
        f.r = start;
        f.phi = [0.0, yaw, 0.0];
        let side = if left { 1.0 } else { -1.0 };
        let (shoulder, elbow) = if left { (L_SHOULDER, L_ELBOW) } else { (R_SHOULDER, R_ELBOW) };
        // upper arm slightly above horizontal, forearm up, oscillating sideways
        f.theta[shoulder][2] = side * raise;
        f.theta[elbow][2] = side * (1.2 + swing * w.sin());
        f.theta[NECK][1] = -side * 0.1;
        f.theta[SPINE2][2] = 0.03 * (0.5 * w).sin();
    }
    b.idle(0.03, rng);
    b.finish()
}

fn squat(n: usize, fps: f64, rng: &mut ChaCha8Rng) -> Vec<RawPose> {
    let mut b = Builder::new(n);
    let (yaw, start) = placement(rng);
    let freq = rng.gen_range(0.3..0.6);
    let depth = rng.gen_range(0.6..1.0);
    let phase = rng.gen_range(0.0..TAU);
    for (t, f) in b.frames.iter_mut().enumerate() {
        let w = TAU * freq * t as f64 / fps + phase;
        let s = depth * 0.5 * (1.0 - w.cos());
        let (hip, knee) = (-1.4 * s, 2.0 * s);
        // pelvis height over the ankles: thigh and shin projected on the vertical
        let drop = 0.78 - (0.38 * hip.cos() + 0.40 * (hip + knee).cos());
        f.r = [start[0], -drop, start[2]];
        f.phi = [0.0, yaw, 0.0];
        for (h, k, a) in [(L_HIP, L_KNEE, L_ANKLE), (R_HIP, R_KNEE, R_ANKLE)] {
            f.theta[h][0] = hip;
            f.theta[k][0] = knee;
            f.theta[a][0] = -0.6 * s;
        }
        f.theta[SPINE1][0] = 0.5 * s;
        f.theta[L_SHOULDER][0] = -0.8 * s;
        f.theta[R_SHOULDER][0] = -0.8 * s;
    }
    b.idle(0.02, rng);
    b.finish()
}

/// Smooth drivers mixed into all body joints through one fixed loading
/// basis: coordinated whole-body motion of low intrinsic dimension, shared
/// by every sequence (as motion synergies are across people).
const SYNERGIES: usize = 6;
const SYNERGY_LOADING_STD: f64 = 0.07;
const SYNERGY_BASIS_SEED: u64 = 0x5e7e_7d1e;

fn synergy_basis() -> &'static Vec<[f64; SYNERGIES]> {
    static BASIS: std::sync::OnceLock<Vec<[f64; SYNERGIES]>> = std::sync::OnceLock::new();
    BASIS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(SYNERGY_BASIS_SEED);
        (0..NUM_BODY_JOINTS * 3)
            .map(|_| std::array::from_fn(|_| SYNERGY_LOADING_STD * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    })
}

fn smooth_random(n: usize, _fps: f64, rng: &mut ChaCha8Rng) -> Vec<RawPose> {
    let mut b = Builder::new(n);
    let (yaw, start) = placement(rng);
    let drivers: Vec<Vec<f64>> = (0..SYNERGIES).map(|_| smooth_noise(n, 10.0, 1.0, rng)).collect();
    for (k, load) in synergy_basis().iter().enumerate() {
        let (j, c) = (k / 3, k % 3);
        for (t, f) in b.frames.iter_mut().enumerate() {
            f.theta[j][c] += (0..SYNERGIES).map(|i| load[i] * drivers[i][t]).sum::<f64>();
        }
    }
    b.idle(0.02, rng);
    let vx = smooth_noise(n, 15.0, 0.01, rng);
    let vz = smooth_noise(n, 15.0, 0.01, rng);
    let turn = smooth_noise(n, 15.0, 0.3, rng);
    let mut pos = start;
    for (t, f) in b.frames.iter_mut().enumerate() {
        pos[0] += vx[t];
        pos[2] += vz[t];
        f.r = pos;
        f.phi = [0.0, yaw + turn[t], 0.0];
    }
    b.finish()
}

/// Procedural clean motion of `round(duration_s * fps)` frames.
pub fn generate_motion(kind: MotionKind, duration_s: f64, fps: f64, shape: &BodyShape, seed: u64) -> Result<MotionSequence> {
    if !(duration_s > 0.0 && fps > 0.0) {
        return Err(Error::Invalid(format!("duration and fps must be positive, got {duration_s} s at {fps} fps")));
    }
    let n = (duration_s * fps).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = match kind {
        MotionKind::Walk => walk(n, fps, &mut rng),
        MotionKind::Wave => wave(n, fps, &mut rng),
        MotionKind::Squat => squat(n, fps, &mut rng),
        MotionKind::SmoothRandom => smooth_random(n, fps, &mut rng),
    };
    Ok(MotionSequence {
        fps,
        betas: *shape,
        frames,
    })
}

pub fn motion_to_json(seq: &MotionSequence) -> Value {
    let frames: Vec<Value> = seq
        .frames
        .iter()
        .map(|f| {
            let pose: Vec<f64> = f.theta.iter().flatten().copied().collect();
            json!({"trans": f.r, "root_orient": f.phi, "pose_body": pose})
        })
        .collect();
    json!({"fps": seq.fps, "betas": seq.betas.betas, "frames": frames})
}

pub fn save_motion(seq: &MotionSequence, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string(&motion_to_json(seq)).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_motion(&text, &path.display().to_string())
}

fn numbers(v: &Value, field: &str, len: usize, origin: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(origin, format!("field `{field}` must be an array")))?;
    if arr.len() != len {
        return Err(Error::parse(origin, format!("field `{field}` needs {len} values, got {}", arr.len())));
    }
    arr.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::parse(origin, format!("field `{field}[{i}]` is not a finite number")))
        })
        .collect()
}

/// Strict parse of the motion format; every field is required.
pub fn parse_motion(text: &str, origin: &str) -> Result<MotionSequence> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| Error::parse(origin, format!("line {} column {}: {e}", e.line(), e.column())))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::parse(origin, "top level must be an object"))?;
    let field = |name: &str| obj.get(name).ok_or_else(|| Error::parse(origin, format!("missing field `{name}`")));
    let fps = field("fps")?
        .as_f64()
        .filter(|f| *f > 0.0 && f.is_finite())
        .ok_or_else(|| Error::parse(origin, "field `fps` must be a positive number"))?;
    let betas = BodyShape::from_slice(&numbers(field("betas")?, "betas", NUM_BETAS, origin)?)?;
    let frames_v = field("frames")?
        .as_array()
        .ok_or_else(|| Error::parse(origin, "field `frames` must be an array"))?;
    if frames_v.is_empty() {
        return Err(Error::parse(origin, "field `frames` is empty"));
    }
    let mut frames = Vec::with_capacity(frames_v.len());
    for (t, fv) in frames_v.iter().enumerate() {
        let get = |name: &str| {
            fv.get(name)
                .ok_or_else(|| Error::parse(origin, format!("missing field `frames[{t}].{name}`")))
        };
        let r = numbers(get("trans")?, &format!("frames[{t}].trans"), 3, origin)?;
        let phi = numbers(get("root_orient")?, &format!("frames[{t}].root_orient"), 3, origin)?;
        let pose = numbers(get("pose_body")?, &format!("frames[{t}].pose_body"), 3 * NUM_BODY_JOINTS, origin)?;
        let mut f = RawPose {
            r: [r[0], r[1], r[2]],
            phi: [phi[0], phi[1], phi[2]],
            ..Default::default()
        };
        for (j, c) in pose.chunks(3).enumerate() {
            f.theta[j] = [c[0], c[1], c[2]];
        }
        frames.push(f);
    }
    Ok(MotionSequence { fps, betas, frames })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub seed: u64,
    pub kinds: Vec<MotionKind>,
    /// Shape coefficients are drawn uniformly from `[-beta_range, beta_range]`.
    pub beta_range: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 25,
            n_test: 25,
            duration_s: 2.0,
            fps: DEFAULT_FPS,
            seed: 0,
            kinds: MotionKind::ALL.to_vec(),
            beta_range: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub sigma: f64,
    pub seed: u64,
    pub include_root: bool,
    /// Clean manifest, relative to this manifest's directory.
    pub clean_manifest: String,
    /// Clean twin of every noisy file, per split, aligned with `splits`.
    pub clean_twins: BTreeMap<String, Vec<String>>,
    /// V2V of the noisy files against their clean twins, per split.
    pub baseline_v2v_cm: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub fps: f64,
    /// Split name to file paths relative to the manifest directory.
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<CorpusConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionSpec>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: CorpusManifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), format!("line {}: {e}", e.line())))?;
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (split, files) in &self.splits {
            for f in files {
                if let Some(other) = seen.insert(f.as_str(), split.as_str()) {
                    return Err(Error::Invalid(format!("`{f}` appears in both `{other}` and `{split}`")));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Invalid(format!("manifest has no split `{name}`")))
    }

    /// Absolute-or-cwd-relative paths of one split.
    pub fn resolve(&self, manifest_path: &Path, split: &str) -> Result<Vec<PathBuf>> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Ok(self.split(split)?.iter().map(|f| base.join(f)).collect())
    }

    pub fn load_split(&self, manifest_path: &Path, split: &str) -> Result<Vec<MotionSequence>> {
        self.resolve(manifest_path, split)?.iter().map(|p| load_motion(p)).collect()
    }

    /// `(noisy, clean)` pairs of a noisy manifest's split.
    pub fn twin_pairs(&self, manifest_path: &Path, split: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
        let spec = self
            .corruption
            .as_ref()
            .ok_or_else(|| Error::Invalid("manifest has no clean twins".into()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let noisy = self.resolve(manifest_path, split)?;
        let clean = spec
            .clean_twins
            .get(split)
            .ok_or_else(|| Error::Invalid(format!("no clean twins for split `{split}`")))?;
        if clean.len() != noisy.len() {
            return Err(Error::Invalid(format!(
                "split `{split}` has {} noisy files but {} clean twins",
                noisy.len(),
                clean.len()
            )));
        }
        Ok(noisy.into_iter().zip(clean.iter().map(|c| base.join(c))).collect())
    }
}

fn split_sizes(config: &CorpusConfig) -> [(&'static str, usize); 3] {
    [("train", config.n_train), ("val", config.n_val), ("test", config.n_test)]
}

/// The `index`-th sequence of a corpus (index runs over train, val, test).
pub fn corpus_sequence(config: &CorpusConfig, index: usize) -> Result<MotionSequence> {
    if config.kinds.is_empty() {
        return Err(Error::Invalid("corpus needs at least one motion kind".into()));
    }
    let seed = step_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut betas = [0.0; NUM_BETAS];
    betas
        .iter_mut()
        .for_each(|b| *b = rng.gen_range(-config.beta_range..=config.beta_range));
    let kind = config.kinds[index % config.kinds.len()];
    generate_motion(kind, config.duration_s, config.fps, &BodyShape::new(betas), rng.gen())
}

/// Write a clean corpus under `out_dir` and its manifest.
pub fn build_clean_corpus(out_dir: &Path, config: &CorpusConfig) -> Result<CorpusManifest> {
    let mut splits = BTreeMap::new();
    let mut index = 0;
    for (split, n) in split_sizes(config) {
        let mut files = Vec::with_capacity(n);
        for i in 0..n {
            let seq = corpus_sequence(config, index)?;
            let rel = format!("{split}/seq_{i:04}.json");
            save_motion(&seq, &out_dir.join(&rel))?;
            files.push(rel);
            index += 1;
        }
        splits.insert(split.to_string(), files);
    }
    let manifest = CorpusManifest {
        seed: config.seed,
        fps: config.fps,
        splits,
        config: Some(config.clone()),
        corruption: None,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// `target` expressed relative to directory `base` (both made absolute).
fn relative_path(target: &Path, base: &Path) -> Result<String> {
    let abs = |p: &Path| -> Result<PathBuf> {
        let p = if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir().map_err(|e| Error::io(".", e))?.join(p)
        };
        // lexical normalization; directories may not exist yet
        let mut out = PathBuf::new();
        for c in p.components() {
            match c {
                Component::ParentDir => {
                    out.pop();
                }
                Component::CurDir => {}
                other => out.push(other),
            }
        }
        Ok(out)
    };
    let (t, b) = (abs(target)?, abs(base)?);
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut rel = PathBuf::new();
    for _ in common..bc.len() {
        rel.push("..");
    }
    for c in &tc[common..] {
        rel.push(c);
    }
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

/// Corrupt every clean sequence with axis-angle noise, writing noisy files and
/// a manifest that pairs them with their clean twins.
pub fn build_noisy_corpus(
    clean_manifest_path: &Path,
    out_dir: &Path,
    sigma: f64,
    seed: u64,
    include_root: bool,
) -> Result<CorpusManifest> {
    let clean = CorpusManifest::load(clean_manifest_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut splits = BTreeMap::new();
    let mut twins = BTreeMap::new();
    let mut baseline = BTreeMap::new();
    let mut index = 0u64;
    for (split, files) in &clean.splits {
        let paths = clean.resolve(clean_manifest_path, split)?;
        let mut noisy_files = Vec::with_capacity(files.len());
        let mut twin_files = Vec::with_capacity(files.len());
        let (mut total, mut count) = (0.0, 0usize);
        for (rel, path) in files.iter().zip(&paths) {
            if !path.exists() {
                return Err(Error::Invalid(format!("clean file {} is missing", path.display())));
            }
            let seq = load_motion(path)?;
            let noisy = MotionSequence {
                frames: inject_pose_noise(&seq.frames, sigma, step_seed(seed, index), include_root)?,
                ..seq.clone()
            };
            index += 1;
            save_motion(&noisy, &out_dir.join(rel))?;
            total += v2v(&noisy.observations(), &seq.observations())?;
            count += 1;
            noisy_files.push(rel.clone());
            twin_files.push(relative_path(path, out_dir)?);
        }
        baseline.insert(split.clone(), if count == 0 { 0.0 } else { total / count as f64 });
        splits.insert(split.clone(), noisy_files);
        twins.insert(split.clone(), twin_files);
    }
    let manifest = CorpusManifest {
        seed: clean.seed,
        fps: clean.fps,
        splits,
        config: clean.config.clone(),
        corruption: Some(CorruptionSpec {
            sigma,
            seed,
            include_root,
            clean_manifest: relative_path(clean_manifest_path, out_dir)?,
            clean_twins: twins,
            baseline_v2v_cm: baseline,
        }),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics_eval::observation_accel;

    fn shape() -> BodyShape {
        BodyShape::new([0.5, -1.0, 0.0, 0.3, 0.0, 0.0, 1.0, 0.0, -0.2, 0.0])
    }

    #[test]
    fn two_seconds_is_sixty_frames() {
        for kind in MotionKind::ALL {
            let s = generate_motion(kind, 2.0, 30.0, &shape(), 1).unwrap();
            assert_eq!(s.len(), 60);
        }
        assert!(generate_motion(MotionKind::Walk, 0.0, 30.0, &shape(), 1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in MotionKind::ALL {
            let a = generate_motion(kind, 1.0, 30.0, &shape(), 9).unwrap();
            let b = generate_motion(kind, 1.0, 30.0, &shape(), 9).unwrap();
            assert_eq!(a, b);
            let c = generate_motion(kind, 1.0, 30.0, &shape(), 10).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn angles_bounded() {
        for kind in MotionKind::ALL {
            for seed in 0..5 {
                let s = generate_motion(kind, 2.0, 30.0, &shape(), seed).unwrap();
                assert!(s.frames.iter().flat_map(|f| f.theta.iter().flatten()).all(|v| v.abs() <= MAX_JOINT_ANGLE));
            }
        }
    }

    #[test]
    fn walk_acceleration_in_human_envelope() {
        for seed in 0..20 {
            let s = generate_motion(MotionKind::Walk, 2.0, 30.0, &shape(), seed).unwrap();
            let a = observation_accel(&s.observations(), 30.0).unwrap();
            assert!((1.0..=20.0).contains(&a), "seed {seed}: {a}");
        }
    }

    #[test]
    fn kind_parsing_names_valid_kinds() {
        assert_eq!("smooth_random".parse::<MotionKind>().unwrap(), MotionKind::SmoothRandom);
        let err = "jog".parse::<MotionKind>().unwrap_err().to_string();
        assert!(err.contains("walk") && err.contains("smooth_random"));
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_motion(MotionKind::SmoothRandom, 1.0, 30.0, &shape(), 4).unwrap();
        let p = dir.path().join("m.json");
        save_motion(&s, &p).unwrap();
        assert_eq!(load_motion(&p).unwrap(), s);
    }

    #[test]
    fn strict_parsing_errors() {
        let s = generate_motion(MotionKind::Wave, 0.1, 30.0, &shape(), 4).unwrap();
        let mut v = motion_to_json(&s);
        v["frames"][1]["pose_body"].as_array_mut().unwrap().pop();
        let err = parse_motion(&v.to_string(), "x.json").unwrap_err().to_string();
        assert!(err.contains("frames[1].pose_body") && err.contains("62"), "{err}");

        let mut v = motion_to_json(&s);
        v.as_object_mut().unwrap().remove("fps");
        let err = parse_motion(&v.to_string(), "x.json").unwrap_err().to_string();
        assert!(err.contains("fps"), "{err}");

        let err = parse_motion("{\"fps\": 30,\n  oops}", "x.json").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn windows_cover_sequence() {
        let s = generate_motion(MotionKind::Walk, 4.0, 30.0, &shape(), 2).unwrap();
        let w = s.windows(60, 30);
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].frames[0], s.frames[30]);
        assert!(s.window(100, 30).is_err());
    }

    #[test]
    fn relative_paths() {
        assert_eq!(relative_path(Path::new("/a/b/c.json"), Path::new("/a/d")).unwrap(), "../b/c.json");
        assert_eq!(relative_path(Path::new("/a/b/c.json"), Path::new("/a")).unwrap(), "b/c.json");
    }

    #[test]
    fn small_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_train: 3,
            n_val: 1,
            n_test: 2,
            duration_s: 0.5,
            ..Default::default()
        };
        let m = build_clean_corpus(dir.path(), &cfg).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        assert_eq!(CorpusManifest::load(&mp).unwrap(), m);
        assert_eq!(m.load_split(&mp, "test").unwrap().len(), 2);

        let zero = build_noisy_corpus(&mp, &dir.path().join("noisy0"), 0.0, 1, true).unwrap();
        assert_eq!(zero.corruption.as_ref().unwrap().baseline_v2v_cm["train"], 0.0);

        let nd = dir.path().join("noisy");
        let nm = build_noisy_corpus(&mp, &nd, 0.1, 1, true).unwrap();
        for (noisy, clean) in nm.twin_pairs(&nd.join(MANIFEST_FILE), "train").unwrap() {
            let (a, b) = (load_motion(&noisy).unwrap(), load_motion(&clean).unwrap());
            assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.r == y.r));
            assert_ne!(a, b);
        }
        std::fs::remove_file(dir.path().join("train/seq_0000.json")).unwrap();
        assert!(build_noisy_corpus(&mp, &dir.path().join("n2"), 0.1, 1, true).is_err());
    }
}
