use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::rotation::Vec3;
use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 22;
pub const NUM_BODY_JOINTS: usize = 21;
pub const NUM_MARKERS: usize = 43;
pub const NUM_POINTS: usize = NUM_JOINTS + NUM_MARKERS;
pub const NUM_BETAS: usize = 10;
/// `[r, r_dot, phi, phi_dot, theta, theta_dot]`
pub const STATE_DIM: usize = 138;
pub const OBS_DIM: usize = NUM_POINTS * 3;

pub const R: usize = 0;
pub const R_DOT: usize = 3;
pub const PHI: usize = 6;
pub const PHI_DOT: usize = 9;
pub const THETA: usize = 12;
pub const THETA_DOT: usize = THETA + NUM_BODY_JOINTS * 3;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
];

const PARENTS: [i32; NUM_JOINTS] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19];

// y up, z forward, x to the body's left; the body frame origin sits on the floor
const REST_OFFSETS: [Vec3; NUM_JOINTS] = [
    [0.0, 0.93, 0.0],
    [0.07, -0.09, 0.0],
    [-0.07, -0.09, 0.0],
    [0.0, 0.11, -0.01],
    [0.04, -0.38, 0.0],
    [-0.04, -0.38, 0.0],
    [0.0, 0.13, 0.01],
    [-0.01, -0.40, -0.04],
    [0.01, -0.40, -0.04],
    [0.0, 0.06, 0.0],
    [0.03, -0.06, 0.12],
    [-0.03, -0.06, 0.12],
    [0.0, 0.21, -0.03],
    [0.08, 0.12, -0.02],
    [-0.08, 0.12, -0.02],
    [0.0, 0.09, 0.05],
    [0.11, 0.04, -0.01],
    [-0.11, 0.04, -0.01],
    [0.26, 0.0, -0.02],
    [-0.26, 0.0, -0.02],
    [0.25, 0.01, 0.0],
    [-0.25, 0.01, 0.0],
];

const MARKERS: [(usize, Vec3); NUM_MARKERS] = [
    (0, [0.08, 0.0, 0.12]),
    (0, [-0.08, 0.0, 0.12]),
    (0, [0.07, 0.02, -0.10]),
    (0, [-0.07, 0.02, -0.10]),
    (1, [0.06, -0.18, 0.04]),
    (2, [-0.06, -0.18, 0.04]),
    (4, [0.05, 0.0, 0.0]),
    (4, [0.0, -0.20, 0.05]),
    (5, [-0.05, 0.0, 0.0]),
    (5, [0.0, -0.20, 0.05]),
    (7, [0.04, 0.0, 0.0]),
    (7, [-0.03, 0.0, 0.0]),
    (8, [-0.04, 0.0, 0.0]),
    (8, [0.03, 0.0, 0.0]),
    (10, [0.0, -0.02, 0.08]),
    (11, [0.0, -0.02, 0.08]),
    (3, [0.0, 0.05, -0.10]),
    (6, [0.0, 0.05, 0.11]),
    (6, [0.0, 0.05, -0.11]),
    (9, [0.08, 0.05, 0.10]),
    (9, [-0.08, 0.05, 0.10]),
    (9, [0.0, 0.12, 0.10]),
    (12, [0.0, 0.03, -0.06]),
    (15, [0.0, 0.17, 0.0]),
    (15, [0.0, 0.08, 0.10]),
    (15, [0.08, 0.08, 0.0]),
    (15, [-0.08, 0.08, 0.0]),
    (13, [0.05, 0.05, 0.0]),
    (14, [-0.05, 0.05, 0.0]),
    (16, [0.02, 0.06, 0.0]),
    (16, [0.13, 0.0, 0.04]),
    (17, [-0.02, 0.06, 0.0]),
    (17, [-0.13, 0.0, 0.04]),
    (18, [0.0, 0.0, -0.04]),
    (18, [0.12, 0.0, 0.04]),
    (19, [0.0, 0.0, -0.04]),
    (19, [-0.12, 0.0, 0.04]),
    (20, [0.0, 0.03, 0.0]),
    (20, [0.0, -0.03, 0.0]),
    (20, [0.08, 0.0, 0.0]),
    (21, [0.0, 0.03, 0.0]),
    (21, [0.0, -0.03, 0.0]),
    (21, [-0.08, 0.0, 0.0]),
];

/// Joint hierarchy, rest offsets and rigid marker attachments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicTree {
    pub parents: Vec<i32>,
    pub offsets: Vec<Vec3>,
    /// `(segment joint, offset in that joint's frame)`
    pub markers: Vec<(usize, Vec3)>,
}

impl KinematicTree {
    /// The 22-joint body used throughout the crate.
    pub fn mini_body() -> &'static KinematicTree {
        static TREE: OnceLock<KinematicTree> = OnceLock::new();
        TREE.get_or_init(|| KinematicTree {
            parents: PARENTS.to_vec(),
            offsets: REST_OFFSETS.to_vec(),
            markers: MARKERS.to_vec(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if self.offsets.len() != n {
            return Err(Error::Invalid("one rest offset per joint".into()));
        }
        let roots = self.parents.iter().filter(|&&p| p < 0).count();
        if roots != 1 || self.parents[0] >= 0 {
            return Err(Error::Invalid("joint 0 must be the only root".into()));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::Invalid(format!("joint {j} has parent {p}; parents must precede children")));
            }
        }
        if self.offsets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite rest offset".into()));
        }
        if self.markers.iter().any(|(s, o)| *s >= n || o.iter().any(|v| !v.is_finite())) {
            return Err(Error::Invalid("marker attached to a missing segment".into()));
        }
        Ok(())
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        let p = self.parents[joint];
        (p >= 0).then_some(p as usize)
    }
}

/// Shape coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BodyShape {
    pub betas: [f64; NUM_BETAS],
}

impl BodyShape {
    pub fn new(betas: [f64; NUM_BETAS]) -> Self {
        Self { betas }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let betas: [f64; NUM_BETAS] = v
            .try_into()
            .map_err(|_| Error::Invalid(format!("expected {NUM_BETAS} shape coefficients, got {}", v.len())))?;
        Ok(Self { betas })
    }

    /// Arithmetic mean of several estimates.
    pub fn mean<'a>(shapes: impl IntoIterator<Item = &'a BodyShape>) -> BodyShape {
        let mut acc = [0.0; NUM_BETAS];
        let mut n = 0usize;
        for s in shapes {
            for (a, b) in acc.iter_mut().zip(&s.betas) {
                *a += b;
            }
            n += 1;
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        BodyShape { betas: acc }
    }
}

const SHAPE_BASIS_SEED: u64 = 0x6d62_6f64_7973_6870;

/// Fixed `22 x 10` basis, entries uniform in `[-0.05, 0.05]`.
pub fn shape_basis() -> &'static [[f64; NUM_BETAS]; NUM_JOINTS] {
    static BASIS: OnceLock<[[f64; NUM_BETAS]; NUM_JOINTS]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(SHAPE_BASIS_SEED);
        let dist = Uniform::new_inclusive(-0.05, 0.05);
        let mut b = [[0.0; NUM_BETAS]; NUM_JOINTS];
        for row in b.iter_mut() {
            for v in row.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        b
    })
}

/// Per-bone length multipliers `clamp(1 + B beta, 0.5, 2.0)`.
pub fn shape_to_bone_scales(shape: &BodyShape) -> [f64; NUM_JOINTS] {
    let basis = shape_basis();
    let mut out = [1.0; NUM_JOINTS];
    for (j, s) in out.iter_mut().enumerate() {
        let delta: f64 = basis[j].iter().zip(&shape.betas).map(|(b, x)| b * x).sum();
        *s = (1.0 + delta).clamp(0.5, 2.0);
    }
    out
}

/// One frame of the motion state.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseState {
    pub r: Vec3,
    pub r_dot: Vec3,
    pub phi: Vec3,
    pub phi_dot: Vec3,
    pub theta: [Vec3; NUM_BODY_JOINTS],
    pub theta_dot: [Vec3; NUM_BODY_JOINTS],
}

impl Default for PoseState {
    fn default() -> Self {
        Self {
            r: [0.0; 3],
            r_dot: [0.0; 3],
            phi: [0.0; 3],
            phi_dot: [0.0; 3],
            theta: [[0.0; 3]; NUM_BODY_JOINTS],
            theta_dot: [[0.0; 3]; NUM_BODY_JOINTS],
        }
    }
}

fn read3(v: &[f64], at: usize) -> Vec3 {
    [v[at], v[at + 1], v[at + 2]]
}

impl PoseState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(STATE_DIM);
        v.extend_from_slice(&self.r);
        v.extend_from_slice(&self.r_dot);
        v.extend_from_slice(&self.phi);
        v.extend_from_slice(&self.phi_dot);
        self.theta.iter().for_each(|a| v.extend_from_slice(a));
        self.theta_dot.iter().for_each(|a| v.extend_from_slice(a));
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(Error::Shape(format!("state needs {STATE_DIM} values, got {}", v.len())));
        }
        let mut s = PoseState {
            r: read3(v, R),
            r_dot: read3(v, R_DOT),
            phi: read3(v, PHI),
            phi_dot: read3(v, PHI_DOT),
            ..Default::default()
        };
        for j in 0..NUM_BODY_JOINTS {
            s.theta[j] = read3(v, THETA + 3 * j);
            s.theta_dot[j] = read3(v, THETA_DOT + 3 * j);
        }
        Ok(s)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// World positions of the 22 joints and 43 markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation3D {
    pub joints: Vec<Vec3>,
    pub markers: Vec<Vec3>,
}

impl Observation3D {
    /// Joints first, then markers, xyz interleaved.
    pub fn to_vec(&self) -> Vec<f64> {
        self.joints.iter().chain(&self.markers).flatten().copied().collect()
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != OBS_DIM {
            return Err(Error::Shape(format!("observation needs {OBS_DIM} values, got {}", v.len())));
        }
        let pts: Vec<Vec3> = v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self {
            joints: pts[..NUM_JOINTS].to_vec(),
            markers: pts[NUM_JOINTS..].to_vec(),
        })
    }

    pub fn points(&self) -> impl Iterator<Item = &Vec3> {
        self.joints.iter().chain(&self.markers)
    }
}
