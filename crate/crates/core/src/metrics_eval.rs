//! Accuracy, plausibility and speed metrics, plus the acceptability-region
//! summary used to compare denoising modes.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{Observation3D, Vec3};

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_lengths(pred: usize, gt: usize) -> Result<()> {
    if pred != gt {
        return Err(Error::Shape(format!("sequence lengths differ: {pred} predicted vs {gt} reference frames")));
    }
    if pred == 0 {
        return Err(Error::Invalid("cannot evaluate an empty sequence".into()));
    }
    Ok(())
}

/// Mean distance over every joint and marker of every frame, in centimeters.
pub fn v2v(pred: &[Observation3D], gt: &[Observation3D]) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.joints.len() != g.joints.len() || p.markers.len() != g.markers.len() {
            return Err(Error::Shape("point counts differ between prediction and reference".into()));
        }
        for (a, b) in p.points().zip(g.points()) {
            total += dist(a, b);
            n += 1;
        }
    }
    Ok(100.0 * total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpjpeMode {
    /// World coordinates, no alignment.
    Global,
    /// Root joint subtracted on both sides.
    Local,
}

/// Mean per-joint position error in centimeters.
pub fn mpjpe(pred: &[Observation3D], gt: &[Observation3D], mode: MpjpeMode) -> Result<f64> {
    mpjpe_masked(pred, gt, mode, None)
}

/// MPJPE restricted to `mask[t][j] == true` entries when a mask is given.
pub fn mpjpe_masked(pred: &[Observation3D], gt: &[Observation3D], mode: MpjpeMode, mask: Option<&[Vec<bool>]>) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    if let Some(m) = mask {
        check_lengths(m.len(), gt.len())?;
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.joints.len() != g.joints.len() || p.joints.is_empty() {
            return Err(Error::Shape("joint counts differ between prediction and reference".into()));
        }
        let (rp, rg) = match mode {
            MpjpeMode::Global => ([0.0; 3], [0.0; 3]),
            MpjpeMode::Local => (p.joints[0], g.joints[0]),
        };
        for (j, (a, b)) in p.joints.iter().zip(&g.joints).enumerate() {
            if mask.is_some_and(|m| !m[t].get(j).copied().unwrap_or(false)) {
                continue;
            }
            let a = [a[0] - rp[0], a[1] - rp[1], a[2] - rp[2]];
            let b = [b[0] - rg[0], b[1] - rg[1], b[2] - rg[2]];
            total += dist(&a, &b);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { 100.0 * total / n as f64 })
}

/// Mean norm of the second difference of joint positions, in m/s^2.
pub fn mean_joint_accel<P: AsRef<[Vec3]>>(frames: &[P], fps: f64) -> Result<f64> {
    if frames.len() < 3 {
        return Err(Error::Invalid(format!("acceleration needs at least 3 frames, got {}", frames.len())));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for w in frames.windows(3) {
        let (a, b, c) = (w[0].as_ref(), w[1].as_ref(), w[2].as_ref());
        if a.len() != b.len() || b.len() != c.len() {
            return Err(Error::Shape("joint count changes within the sequence".into()));
        }
        for j in 0..b.len() {
            let d = [
                c[j][0] - 2.0 * b[j][0] + a[j][0],
                c[j][1] - 2.0 * b[j][1] + a[j][1],
                c[j][2] - 2.0 * b[j][2] + a[j][2],
            ];
            total += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            n += 1;
        }
    }
    Ok(total / n as f64 * fps * fps)
}

/// Joint acceleration of an observation sequence.
pub fn observation_accel(frames: &[Observation3D], fps: f64) -> Result<f64> {
    let joints: Vec<&[Vec3]> = frames.iter().map(|o| o.joints.as_slice()).collect();
    mean_joint_accel(&joints, fps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedResult {
    pub sec_per_frame: f64,
    pub frames: usize,
    pub runs: usize,
}

/// Wall-clock seconds per frame: one untimed warm-up, then the median of
/// `runs` timed passes. `method` returns the number of frames it processed.
pub fn speed_benchmark<S, F>(mut method: F, sequences: &[S], runs: usize) -> Result<SpeedResult>
where
    F: FnMut(&S) -> Result<usize>,
{
    let runs = runs.max(1);
    let pass = |method: &mut F| -> Result<usize> {
        let mut frames = 0;
        for s in sequences {
            frames += method(s)?;
        }
        Ok(frames)
    };
    pass(&mut method)?;
    let mut times = Vec::with_capacity(runs);
    let mut frames = 0;
    for _ in 0..runs {
        let start = Instant::now();
        frames = pass(&mut method)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    Ok(SpeedResult {
        sec_per_frame: if frames == 0 { 0.0 } else { median / frames as f64 },
        frames,
        runs,
    })
}

/// Metrics of one denoised sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub v2v_cm: f64,
    pub mpjpe_cm: f64,
    pub gmpjpe_cm: f64,
    pub accel_m_s2: f64,
    pub sec_per_frame: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpjpe_visible_cm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpjpe_occluded_cm: Option<f64>,
}

impl SequenceMetrics {
    pub fn compute(name: &str, pred: &[Observation3D], gt: &[Observation3D], fps: f64, sec_per_frame: f64) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            v2v_cm: v2v(pred, gt)?,
            mpjpe_cm: mpjpe(pred, gt, MpjpeMode::Local)?,
            gmpjpe_cm: mpjpe(pred, gt, MpjpeMode::Global)?,
            accel_m_s2: observation_accel(pred, fps)?,
            sec_per_frame,
            mpjpe_visible_cm: None,
            mpjpe_occluded_cm: None,
        })
    }

    /// Adds the visible/occluded split of global MPJPE.
    pub fn with_visibility(mut self, pred: &[Observation3D], gt: &[Observation3D], visible: &[Vec<bool>]) -> Result<Self> {
        let occluded: Vec<Vec<bool>> = visible.iter().map(|f| f.iter().map(|v| !v).collect()).collect();
        self.mpjpe_visible_cm = Some(mpjpe_masked(pred, gt, MpjpeMode::Global, Some(visible))?);
        self.mpjpe_occluded_cm = Some(mpjpe_masked(pred, gt, MpjpeMode::Global, Some(&occluded))?);
        Ok(self)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub sigma: Option<f64>,
    pub split: String,
    pub sequences: Vec<SequenceMetrics>,
    pub aggregate: SequenceMetrics,
}

impl EvalReport {
    pub fn new(method: &str, sigma: Option<f64>, split: &str, sequences: Vec<SequenceMetrics>) -> Self {
        let n = sequences.len().max(1) as f64;
        let mean = |f: fn(&SequenceMetrics) -> f64| sequences.iter().map(f).sum::<f64>() / n;
        let mean_opt = |f: fn(&SequenceMetrics) -> Option<f64>| {
            let vals: Vec<f64> = sequences.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let aggregate = SequenceMetrics {
            name: "mean".into(),
            v2v_cm: mean(|s| s.v2v_cm),
            mpjpe_cm: mean(|s| s.mpjpe_cm),
            gmpjpe_cm: mean(|s| s.gmpjpe_cm),
            accel_m_s2: mean(|s| s.accel_m_s2),
            sec_per_frame: mean(|s| s.sec_per_frame),
            mpjpe_visible_cm: mean_opt(|s| s.mpjpe_visible_cm),
            mpjpe_occluded_cm: mean_opt(|s| s.mpjpe_occluded_cm),
        };
        Self {
            method: method.into(),
            sigma,
            split: split.into(),
            sequences,
            aggregate,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub const CSV_HEADER: &str = "method,sigma,split,v2v_cm,mpjpe_cm,gmpjpe_cm,accel_m_s2,sec_per_frame";

/// One aggregate row per report.
pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let a = &r.aggregate;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            r.sigma.map(|s| s.to_string()).unwrap_or_default(),
            r.split,
            a.v2v_cm,
            a.mpjpe_cm,
            a.gmpjpe_cm,
            a.accel_m_s2,
            a.sec_per_frame
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// V2V of the raw noisy observations.
    pub obs_v2v: f64,
    /// Joint acceleration of the clean reference motion.
    pub gt_accel: f64,
    pub fps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Green,
    Yellow,
    Red,
}

impl Region {
    fn of(a: bool, b: bool) -> Self {
        match (a, b) {
            (true, true) => Region::Green,
            (false, false) => Region::Red,
            _ => Region::Yellow,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Green => "green",
            Region::Yellow => "yellow",
            Region::Red => "red",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub accuracy_pass: bool,
    pub plausibility_pass: bool,
    pub speed_pass: bool,
    pub accuracy_ratio: f64,
    pub accel_ratio: f64,
    pub speed_limit_s: f64,
    /// Speed vs accuracy panel.
    pub accuracy_region: Region,
    /// Speed vs plausibility panel.
    pub plausibility_region: Region,
}

impl ThresholdReport {
    pub fn summary(&self) -> String {
        let mark = |p: bool| if p { "pass" } else { "FAIL" };
        format!(
            "accuracy {} (v2v/obs = {:.3}, limit 0.667)\nplausibility {} (accel/gt = {:.3}, band [0.5, 2])\nspeed {} (limit {:.4} s/frame)\nspeed-accuracy region: {}\nspeed-plausibility region: {}",
            mark(self.accuracy_pass),
            self.accuracy_ratio,
            mark(self.plausibility_pass),
            self.accel_ratio,
            mark(self.speed_pass),
            self.speed_limit_s,
            self.accuracy_region,
            self.plausibility_region
        )
    }
}

/// Accuracy: at least a third less error than the observations. Plausibility:
/// acceleration within half and double of the reference. Speed: at most ten
/// frame periods per frame.
pub fn threshold_report(report: &SequenceMetrics, baselines: &Baselines) -> ThresholdReport {
    let accuracy_pass = report.v2v_cm <= (2.0 / 3.0) * baselines.obs_v2v;
    let accel_ratio = report.accel_m_s2 / baselines.gt_accel;
    let plausibility_pass = (0.5..=2.0).contains(&accel_ratio);
    let speed_limit_s = 10.0 / baselines.fps;
    let speed_pass = report.sec_per_frame <= speed_limit_s;
    ThresholdReport {
        accuracy_pass,
        plausibility_pass,
        speed_pass,
        accuracy_ratio: report.v2v_cm / baselines.obs_v2v,
        accel_ratio,
        speed_limit_s,
        accuracy_region: Region::of(speed_pass, accuracy_pass),
        plausibility_region: Region::of(speed_pass, plausibility_pass),
    }
}
