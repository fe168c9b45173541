//! Global trajectory from 2D keypoints: with the body pose and shape fixed,
//! find the per-frame translation and root orientation whose projected joints
//! best match confidence-weighted detections under a robust penalty, while
//! keeping consecutive 3D joint sets close.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::{lbfgs_minimize, LbfgsConfig, Tensor};
use crate::error::{Error, Result};
use crate::kinematics::fk::{fk_frames, fk_vjp};
use crate::kinematics::rotation::{log_map, mat_mul, mat_tvec, mat_vec, rodrigues, rodrigues_with_jacobian, Mat3, Vec3};
use crate::kinematics::{shape_to_bone_scales, BodyShape, KinematicTree, RawPose, NUM_JOINTS, NUM_MARKERS};

/// Pinhole camera: `x_cam = rotation * x_world + translation`, then
/// `(fx x / z + cx, fy y / z + cy)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R", with = "flat_rotation")]
    pub rotation: Mat3,
    #[serde(rename = "t")]
    pub translation: Vec3,
}

mod flat_rotation {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::kinematics::rotation::Mat3;

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        m.iter().flatten().copied().collect::<Vec<f64>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 9 {
            return Err(serde::de::Error::custom(format!("R needs 9 entries, got {}", v.len())));
        }
        Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target` with +y world up (image v grows
    /// downwards).
    pub fn looking_at(eye: Vec3, target: Vec3, focal: f64, width: f64, height: f64) -> Result<Self> {
        let sub = |a: Vec3, b: Vec3| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let norm = |a: Vec3| {
            let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            [a[0] / n, a[1] / n, a[2] / n]
        };
        let cross = |a: Vec3, b: Vec3| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        let z = norm(sub(target, eye));
        let x = norm(cross(z, [0.0, -1.0, 0.0]));
        let y = cross(z, x);
        let rotation = [x, y, z];
        let rc = mat_vec(&rotation, &eye);
        Self::new(focal, focal, width / 2.0, height / 2.0, rotation, [-rc[0], -rc[1], -rc[2]])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || ![self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("camera focal lengths must be positive and the principal point finite".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                if (d - if i == j { 1.0 } else { 0.0 }).abs() > 1e-6 {
                    return Err(Error::Domain("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let q = mat_vec(&self.rotation, p);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }

    /// World point on the ray through pixel `(u, v)` at camera depth `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let c = [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth];
        mat_tvec(&self.rotation, &[c[0] - self.translation[0], c[1] - self.translation[1], c[2] - self.translation[2]])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cam: Self = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), format!("line {}: {e}", e.line())))?;
        cam.validate().map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        Ok(cam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Pixel coordinates of a world point, or `None` when it is not in front of
/// the camera.
pub fn project(p: &Vec3, camera: &PinholeCamera) -> Option<[f64; 2]> {
    let c = camera.to_camera(p);
    (c[2] > 0.0).then(|| [camera.fx * c[0] / c[2] + camera.cx, camera.fy * c[1] / c[2] + camera.cy])
}

/// Project many points; an error names the first point behind the camera.
pub fn project_all(points: &[Vec3], camera: &PinholeCamera) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| project(p, camera).ok_or_else(|| Error::Domain(format!("point {i} is not in front of the camera"))))
        .collect()
}

/// Geman-McClure penalty `e^2 / (e^2 + c^2)`.
pub fn geman_mcclure(residual: f64, c: f64) -> f64 {
    let e2 = residual * residual;
    e2 / (e2 + c * c)
}

/// One frame of 2D joint detections.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection2D {
    /// `(u, v)` pixels and confidence in `[0, 1]` per joint.
    pub joints: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    joints: Vec<[f64; 3]>,
}

impl Detection2D {
    pub fn new(joints: Vec<[f64; 3]>) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(Error::Shape(format!("detections need {NUM_JOINTS} joints, got {}", joints.len())));
        }
        if let Some(j) = joints.iter().position(|j| !(0.0..=1.0).contains(&j[2]) || !j[0].is_finite() || !j[1].is_finite()) {
            return Err(Error::Domain(format!("joint {j}: confidence must be in [0, 1] and pixels finite")));
        }
        Ok(Self { joints })
    }

    /// Render joints through a camera with a uniform confidence; joints
    /// behind the camera get confidence 0.
    pub fn render(joints: &[Vec3], camera: &PinholeCamera, confidence: f64) -> Self {
        Self {
            joints: joints
                .iter()
                .map(|p| match project(p, camera) {
                    Some([u, v]) => [u, v, confidence],
                    None => [0.0, 0.0, 0.0],
                })
                .collect(),
        }
    }
}

/// Detections as JSON lines, one frame per line.
pub fn parse_detections(text: &str, origin: &str) -> Result<Vec<Detection2D>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::parse(origin, format!("line {}: {m}", i + 1));
        let d: DetectionLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        out.push(Detection2D::new(d.joints).map_err(|e| err(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::parse(origin, "no detection frames"));
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection2D>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string())
}

pub fn save_detections(dets: &[Detection2D], path: &Path) -> Result<()> {
    let mut text = String::new();
    for d in dets {
        let line = serde_json::to_string(&DetectionLine { joints: d.joints.clone() }).map_err(|e| Error::Invalid(e.to_string()))?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub lambda_data: f64,
    pub lambda_smooth: f64,
    /// Geman-McClure scale in pixels.
    pub c: f64,
    pub max_iters: usize,
    /// Frames whose detections all fall below this confidence carry no data
    /// term.
    pub min_confidence: f64,
    /// Start from the input translations instead of the depth heuristic.
    pub use_input_translation: bool,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            lambda_data: 1.0,
            lambda_smooth: 0.1,
            c: 20.0,
            max_iters: 1000,
            min_confidence: 0.05,
            use_input_translation: false,
        }
    }
}

/// A fitting problem over the stacked variables `[r_t, delta_t]` per frame,
/// where the root rotation is `R(phi_init_t) R(delta_t)`.
pub struct TrajectoryProblem {
    detections: Vec<Detection2D>,
    theta: Vec<Vec<Vec3>>,
    root_init: Vec<Mat3>,
    scales: [f64; NUM_JOINTS],
    camera: PinholeCamera,
    config: TrajectoryConfig,
    /// Whether each frame contributes a data term.
    active: Vec<bool>,
}

impl TrajectoryProblem {
    pub fn new(detections: &[Detection2D], poses: &[RawPose], shape: &BodyShape, camera: &PinholeCamera, config: &TrajectoryConfig) -> Result<Self> {
        if detections.len() != poses.len() || poses.is_empty() {
            return Err(Error::Shape(format!("{} detection frames for {} poses", detections.len(), poses.len())));
        }
        if !(config.c > 0.0) || !(config.lambda_data >= 0.0) || !(config.lambda_smooth >= 0.0) {
            return Err(Error::Domain("c must be positive and the weights non-negative".into()));
        }
        camera.validate()?;
        Ok(Self {
            active: detections.iter().map(|d| d.joints.iter().any(|j| j[2] >= config.min_confidence)).collect(),
            detections: detections.to_vec(),
            theta: poses.iter().map(|p| p.theta.to_vec()).collect(),
            root_init: poses.iter().map(|p| rodrigues(&p.phi)).collect(),
            scales: shape_to_bone_scales(shape),
            camera: camera.clone(),
            config: config.clone(),
        })
    }

    pub fn frames(&self) -> usize {
        self.theta.len()
    }

    pub fn dim(&self) -> usize {
        6 * self.frames()
    }

    /// Translation and root axis-angle of every frame for a variable vector.
    pub fn trajectory(&self, x: &[f64]) -> (Vec<Vec3>, Vec<Vec3>) {
        (0..self.frames())
            .map(|t| {
                let v = &x[6 * t..6 * t + 6];
                let rot = mat_mul(&self.root_init[t], &rodrigues(&[v[3], v[4], v[5]]));
                ([v[0], v[1], v[2]], log_map(&rot))
            })
            .unzip()
    }

    /// Objective and gradient at `x`.
    pub fn evaluate(&self, x: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(x.len(), self.dim());
        let tree = KinematicTree::mini_body();
        let cfg = &self.config;
        let c2 = cfg.c * cfg.c;
        let n = self.frames();
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        let mut frames = Vec::with_capacity(n);
        for t in 0..n {
            let v = &x[6 * t..6 * t + 6];
            let (rd, jd) = rodrigues_with_jacobian(&[v[3], v[4], v[5]]);
            let r0 = &self.root_init[t];
            let jac = [mat_mul(r0, &jd[0]), mat_mul(r0, &jd[1]), mat_mul(r0, &jd[2])];
            frames.push(fk_frames(tree, &self.scales, &[v[0], v[1], v[2]], &mat_mul(r0, &rd), jac, &self.theta[t]));
        }
        let mut d_joints = vec![[[0.0; 3]; NUM_JOINTS]; n];
        for t in 0..n {
            if !self.active[t] || cfg.lambda_data == 0.0 {
                continue;
            }
            for (j, det) in self.detections[t].joints.iter().enumerate() {
                let conf = det[2];
                if conf == 0.0 {
                    continue;
                }
                let pc = self.camera.to_camera(&frames[t].joints[j]);
                if pc[2] <= 0.0 {
                    // behind the camera: saturated penalty, no gradient
                    value += cfg.lambda_data * conf;
                    continue;
                }
                let (u, w) = (self.camera.fx * pc[0] / pc[2] + self.camera.cx, self.camera.fy * pc[1] / pc[2] + self.camera.cy);
                let (eu, ev) = (u - det[0], w - det[1]);
                let s = eu * eu + ev * ev;
                value += cfg.lambda_data * conf * s / (s + c2);
                let ds = cfg.lambda_data * conf * c2 / ((s + c2) * (s + c2));
                let (gu, gv) = (2.0 * ds * eu, 2.0 * ds * ev);
                let inv = 1.0 / pc[2];
                let gc = [
                    gu * self.camera.fx * inv,
                    gv * self.camera.fy * inv,
                    -(gu * self.camera.fx * pc[0] + gv * self.camera.fy * pc[1]) * inv * inv,
                ];
                let gw = mat_tvec(&self.camera.rotation, &gc);
                for k in 0..3 {
                    d_joints[t][j][k] += gw[k];
                }
            }
        }
        if cfg.lambda_smooth > 0.0 {
            for t in 1..n {
                for j in 0..NUM_JOINTS {
                    for k in 0..3 {
                        let d = frames[t].joints[j][k] - frames[t - 1].joints[j][k];
                        value += cfg.lambda_smooth * d * d;
                        d_joints[t][j][k] += 2.0 * cfg.lambda_smooth * d;
                        d_joints[t - 1][j][k] -= 2.0 * cfg.lambda_smooth * d;
                    }
                }
            }
        }
        let no_markers = [[0.0; 3]; NUM_MARKERS];
        for t in 0..n {
            let g = fk_vjp(tree, &frames[t], &d_joints[t], &no_markers);
            grad[6 * t..6 * t + 3].copy_from_slice(&g.r);
            grad[6 * t + 3..6 * t + 6].copy_from_slice(&g.phi);
        }
        (value, grad)
    }

    /// Per-frame translation from the ratio of metric to pixel bone lengths
    /// and the detected joint centroid; frames without data copy a neighbor.
    fn initial_translation(&self) -> Vec<Vec3> {
        let tree = KinematicTree::mini_body();
        let f = 0.5 * (self.camera.fx + self.camera.fy);
        let mut out: Vec<Option<Vec3>> = vec![None; self.frames()];
        for t in 0..self.frames() {
            if !self.active[t] {
                continue;
            }
            let zero = [[0.0; 3]; 3];
            let fr = fk_frames(tree, &self.scales, &[0.0; 3], &self.root_init[t], [zero; 3], &self.theta[t]);
            let det = &self.detections[t].joints;
            let ok = |j: usize| det[j][2] >= self.config.min_confidence;
            let (mut metric, mut pixel) = (0.0, 0.0);
            for j in 1..NUM_JOINTS {
                let p = tree.parents[j] as usize;
                if ok(j) && ok(p) {
                    let a = fr.joints[j];
                    let b = fr.joints[p];
                    metric += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                    pixel += ((det[j][0] - det[p][0]).powi(2) + (det[j][1] - det[p][1]).powi(2)).sqrt();
                }
            }
            let vis: Vec<usize> = (0..NUM_JOINTS).filter(|&j| ok(j)).collect();
            if pixel <= 0.0 || vis.is_empty() {
                continue;
            }
            let depth = f * metric / pixel;
            let k = vis.len() as f64;
            let (u, v) = vis.iter().fold((0.0, 0.0), |a, &j| (a.0 + det[j][0] / k, a.1 + det[j][1] / k));
            let centroid = self.camera.back_project(u, v, depth);
            let body = vis.iter().fold([0.0; 3], |a, &j| [a[0] + fr.joints[j][0] / k, a[1] + fr.joints[j][1] / k, a[2] + fr.joints[j][2] / k]);
            out[t] = Some([centroid[0] - body[0], centroid[1] - body[1], centroid[2] - body[2]]);
        }
        let mut last = out.iter().flatten().next().copied().unwrap_or([0.0; 3]);
        out.into_iter()
            .map(|o| {
                if let Some(v) = o {
                    last = v;
                }
                last
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryFit {
    pub r: Vec<Vec3>,
    pub phi: Vec<Vec3>,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

/// Fit translation and root orientation to 2D detections with body pose
/// (`theta` of `poses`) and shape held fixed. The root orientation starts
/// from `poses`' `phi`; the translation from `poses`' `r` when configured,
/// otherwise from a per-frame depth estimate.
pub fn fit_global_trajectory(
    detections: &[Detection2D],
    poses: &[RawPose],
    shape: &BodyShape,
    camera: &PinholeCamera,
    config: &TrajectoryConfig,
) -> Result<TrajectoryFit> {
    let problem = TrajectoryProblem::new(detections, poses, shape, camera, config)?;
    let r0 = if config.use_input_translation {
        poses.iter().map(|p| p.r).collect()
    } else {
        problem.initial_translation()
    };
    let mut x0 = vec![0.0; problem.dim()];
    for (t, r) in r0.iter().enumerate() {
        x0[6 * t..6 * t + 3].copy_from_slice(r);
    }
    let init = Tensor::row(x0);
    let out = lbfgs_minimize(
        |x| problem.evaluate(x),
        &init,
        &LbfgsConfig {
            max_iters: config.max_iters,
            tolerance: 1e-9,
            ..LbfgsConfig::default()
        },
    );
    if !out.value.is_finite() {
        return Err(Error::NonFinite {
            step: out.iterations,
            detail: "trajectory objective".into(),
        });
    }
    let (r, phi) = problem.trajectory(out.point.values());
    Ok(TrajectoryFit {
        r,
        phi,
        initial_objective: out.trace[0],
        objective: out.value,
        iterations: out.iterations,
        trace: out.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_motion, MotionKind};
    use crate::diffmath::{grad_check_with, GradCheckConfig, ParamSet};

    fn camera() -> PinholeCamera {
        PinholeCamera::looking_at([0.5, 1.2, -4.0], [0.0, 0.9, 0.0], 1000.0, 1280.0, 720.0).unwrap()
    }

    fn scene(frames: usize) -> (Vec<RawPose>, Vec<Detection2D>, BodyShape) {
        let shape = BodyShape::default();
        let seq = generate_motion(MotionKind::Squat, 1.0, 30.0, &shape, 2).unwrap();
        let poses: Vec<RawPose> = seq.frames[..frames].to_vec();
        let cam = camera();
        let dets = seq.observations()[..frames].iter().map(|o| Detection2D::render(&o.joints, &cam, 1.0)).collect();
        (poses, dets, shape)
    }

    #[test]
    fn projection_basics() {
        let cam = PinholeCamera::new(800.0, 700.0, 320.0, 240.0, crate::kinematics::rotation::IDENTITY, [0.0; 3]).unwrap();
        assert_eq!(project(&[0.0, 0.0, 3.0], &cam), Some([320.0, 240.0]));
        let a = project(&[0.2, -0.1, 2.0], &cam).unwrap();
        let b = project(&[0.2, -0.1, 4.0], &cam).unwrap();
        assert!(((a[0] - 320.0) - 2.0 * (b[0] - 320.0)).abs() < 1e-12);
        assert!(((a[1] - 240.0) - 2.0 * (b[1] - 240.0)).abs() < 1e-12);
        assert_eq!(project(&[0.0, 0.0, -1.0], &cam), None);
        assert!(project_all(&[[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]], &cam).is_err());
    }

    #[test]
    fn geman_mcclure_shape() {
        assert_eq!(geman_mcclure(0.0, 3.0), 0.0);
        assert!((geman_mcclure(3.0, 3.0) - 0.5).abs() < 1e-15);
        assert!(geman_mcclure(3e6, 3.0) > 0.999999);
        assert!(geman_mcclure(2.0, 1.0) > geman_mcclure(1.0, 1.0));
    }

    #[test]
    fn camera_and_detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cam = camera();
        cam.save(&dir.path().join("cam.json")).unwrap();
        assert_eq!(PinholeCamera::load(&dir.path().join("cam.json")).unwrap(), cam);
        let (_, dets, _) = scene(3);
        save_detections(&dets, &dir.path().join("d.jsonl")).unwrap();
        assert_eq!(load_detections(&dir.path().join("d.jsonl")).unwrap(), dets);
    }

    #[test]
    fn malformed_detection_reports_its_line() {
        let good = serde_json::to_string(&DetectionLine { joints: vec![[1.0, 2.0, 0.5]; NUM_JOINTS] }).unwrap();
        let bad = serde_json::to_string(&DetectionLine { joints: vec![[1.0, 2.0, 1.5]; NUM_JOINTS] }).unwrap();
        let err = parse_detections(&format!("{good}\n{bad}\n"), "d.jsonl").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_detections(&format!("{good}\n{{oops\n"), "d.jsonl").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn non_orthonormal_camera_is_rejected() {
        let mut r = crate::kinematics::rotation::IDENTITY;
        r[0][0] = 2.0;
        assert!(PinholeCamera::new(1.0, 1.0, 0.0, 0.0, r, [0.0; 3]).is_err());
        assert!(PinholeCamera::new(0.0, 1.0, 0.0, 0.0, crate::kinematics::rotation::IDENTITY, [0.0; 3]).is_err());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (poses, dets, shape) = scene(3);
        let config = TrajectoryConfig {
            c: 20.0,
            ..TrajectoryConfig::default()
        };
        let problem = TrajectoryProblem::new(&dets, &poses, &shape, &camera(), &config).unwrap();
        // off the optimum so both terms have gradient
        let x: Vec<f64> = (0..problem.dim()).map(|i| poses[i / 6].r.get(i % 6).copied().unwrap_or(0.0) + 0.03 * ((i % 5) as f64 - 2.0)).collect();
        let mut params = ParamSet::new();
        params.insert("x", Tensor::row(x)).unwrap();
        let report = grad_check_with(
            |p: &ParamSet| {
                let (v, g) = problem.evaluate(p.get("x").unwrap().values());
                let mut gp = ParamSet::new();
                gp.insert("x", Tensor::row(g)).unwrap();
                Ok((v, gp))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn zero_confidence_joints_do_not_affect_the_objective() {
        let (poses, mut dets, shape) = scene(4);
        for d in dets.iter_mut() {
            d.joints[5][2] = 0.0;
        }
        let config = TrajectoryConfig::default();
        let a = TrajectoryProblem::new(&dets, &poses, &shape, &camera(), &config).unwrap();
        for d in dets.iter_mut() {
            d.joints[5][0] += 345.0;
            d.joints[5][1] -= 91.0;
        }
        let b = TrajectoryProblem::new(&dets, &poses, &shape, &camera(), &config).unwrap();
        let x: Vec<f64> = (0..a.dim()).map(|i| 0.01 * i as f64).collect();
        let (va, ga) = a.evaluate(&x);
        let (vb, gb) = b.evaluate(&x);
        assert_eq!(va.to_bits(), vb.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn noiseless_detections_recover_the_trajectory() {
        let (poses, dets, shape) = scene(20);
        let mut start = poses.clone();
        for (t, p) in start.iter_mut().enumerate() {
            p.r[0] += 0.15;
            p.r[2] -= 0.2 + 0.002 * t as f64;
            p.phi[1] += 0.1;
        }
        let config = TrajectoryConfig {
            use_input_translation: true,
            ..TrajectoryConfig::default()
        };
        let fit = fit_global_trajectory(&dets, &start, &shape, &camera(), &config).unwrap();
        assert!(fit.objective <= fit.initial_objective);
        for (t, (r, p)) in fit.r.iter().zip(&poses).enumerate() {
            let err = ((r[0] - p.r[0]).powi(2) + (r[1] - p.r[1]).powi(2) + (r[2] - p.r[2]).powi(2)).sqrt();
            assert!(err <= 0.01, "frame {t}: {err}");
        }
    }

    #[test]
    fn depth_heuristic_lands_near_the_truth() {
        let (poses, dets, shape) = scene(5);
        let problem = TrajectoryProblem::new(&dets, &poses, &shape, &camera(), &TrajectoryConfig::default()).unwrap();
        for (r, p) in problem.initial_translation().iter().zip(&poses) {
            let err = ((r[0] - p.r[0]).powi(2) + (r[1] - p.r[1]).powi(2) + (r[2] - p.r[2]).powi(2)).sqrt();
            assert!(err < 0.5, "{err}");
        }
        let fit = fit_global_trajectory(&dets, &poses, &shape, &camera(), &TrajectoryConfig::default()).unwrap();
        assert!(fit.objective <= fit.initial_objective);
        for (r, p) in fit.r.iter().zip(&poses) {
            let err = ((r[0] - p.r[0]).powi(2) + (r[1] - p.r[1]).powi(2) + (r[2] - p.r[2]).powi(2)).sqrt();
            assert!(err <= 0.01, "{err}");
        }
    }

    #[test]
    fn frames_without_confident_detections_carry_no_data_term() {
        let (poses, mut dets, shape) = scene(3);
        dets[1].joints.iter_mut().for_each(|j| j[2] = 0.04);
        let config = TrajectoryConfig {
            lambda_smooth: 0.0,
            ..TrajectoryConfig::default()
        };
        let p = TrajectoryProblem::new(&dets, &poses, &shape, &camera(), &config).unwrap();
        let mut x = vec![0.0; p.dim()];
        let (v0, g0) = p.evaluate(&x);
        x[6] += 1.0;
        let (v1, _) = p.evaluate(&x);
        assert_eq!(v0, v1);
        assert!(g0[6..12].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_frame_without_smoothing_is_pure_reprojection() {
        let (poses, dets, shape) = scene(1);
        let config = TrajectoryConfig {
            lambda_smooth: 0.0,
            c: 20.0,
            ..TrajectoryConfig::default()
        };
        let p = TrajectoryProblem::new(&dets, &poses, &shape, &camera(), &config).unwrap();
        let x = vec![poses[0].r[0] + 0.05, poses[0].r[1], poses[0].r[2] - 0.1, 0.02, 0.0, 0.0];
        let (v, _) = p.evaluate(&x);
        let (r, phi) = p.trajectory(&x);
        let state = crate::kinematics::PoseState {
            r: r[0],
            phi: phi[0],
            theta: poses[0].theta,
            ..Default::default()
        };
        let joints = crate::kinematics::forward_kinematics(&state, &shape).joints;
        let expected: f64 = joints
            .iter()
            .zip(&dets[0].joints)
            .map(|(j, d)| {
                let [u, w] = project(j, &camera()).unwrap();
                geman_mcclure(((u - d[0]).powi(2) + (w - d[1]).powi(2)).sqrt(), 20.0)
            })
            .sum();
        assert!((v - expected).abs() <= 1e-9 * expected.max(1.0), "{v} vs {expected}");
    }
}
