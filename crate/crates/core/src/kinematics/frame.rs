//! Heading-and-ground-position reference frames.
//!
//! Motion dynamics do not depend on where a person stands on the floor or
//! which way they face, so sequences are modeled in the frame of their first
//! state: origin below the root, forward axis along its heading. Up is +y.

use std::f64::consts::{PI, TAU};

use super::body::{Observation3D, PoseState};
use super::rotation::{log_map, mat_mul, mat_vec, rodrigues, Mat3, Vec3};

/// Heading of a root orientation: angle about +y of its forward (+z) axis.
pub fn heading(phi: &Vec3) -> f64 {
    let r = rodrigues(phi);
    r[0][2].atan2(r[2][2])
}

fn yaw_matrix(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// The axis-angle vector equivalent to `w` (same rotation) closest to
/// `reference`.
pub fn nearest_equivalent(w: Vec3, reference: &Vec3) -> Vec3 {
    let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if n < 1e-12 {
        return w;
    }
    let dist = |v: &Vec3| (0..3).map(|i| (v[i] - reference[i]).powi(2)).sum::<f64>();
    let mut best = w;
    for k in [-1.0, 1.0] {
        let f = (n + k * TAU) / n;
        let cand = [w[0] * f, w[1] * f, w[2] * f];
        if dist(&cand) < dist(&best) {
            best = cand;
        }
    }
    best
}

/// A frame on the floor: `origin` is its (x, z) position in world
/// coordinates, `yaw` its heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RootFrame {
    pub yaw: f64,
    pub origin: [f64; 2],
}

impl RootFrame {
    pub const WORLD: RootFrame = RootFrame {
        yaw: 0.0,
        origin: [0.0, 0.0],
    };

    /// Frame below `state`'s root, facing along its heading.
    pub fn of(state: &PoseState) -> Self {
        Self {
            yaw: heading(&state.phi),
            origin: [state.r[0], state.r[2]],
        }
    }

    pub fn rotated(self, dyaw: f64) -> Self {
        Self {
            yaw: (self.yaw + dyaw + PI).rem_euclid(TAU) - PI,
            ..self
        }
    }

    /// World → local rotation.
    fn inverse_rotation(&self) -> Mat3 {
        yaw_matrix(-self.yaw)
    }

    pub fn point_to_local(&self, p: &Vec3) -> Vec3 {
        let shifted = [p[0] - self.origin[0], p[1], p[2] - self.origin[1]];
        mat_vec(&self.inverse_rotation(), &shifted)
    }

    pub fn point_to_world(&self, p: &Vec3) -> Vec3 {
        let q = mat_vec(&yaw_matrix(self.yaw), p);
        [q[0] + self.origin[0], q[1], q[2] + self.origin[1]]
    }

    pub fn obs_to_local(&self, o: &Observation3D) -> Observation3D {
        Observation3D {
            joints: o.joints.iter().map(|p| self.point_to_local(p)).collect(),
            markers: o.markers.iter().map(|p| self.point_to_local(p)).collect(),
        }
    }

    pub fn obs_to_world(&self, o: &Observation3D) -> Observation3D {
        Observation3D {
            joints: o.joints.iter().map(|p| self.point_to_world(p)).collect(),
            markers: o.markers.iter().map(|p| self.point_to_world(p)).collect(),
        }
    }

    pub fn state_to_local(&self, s: &PoseState) -> PoseState {
        transform_state(s, &self.inverse_rotation(), |p| self.point_to_local(p))
    }

    pub fn state_to_world(&self, s: &PoseState) -> PoseState {
        transform_state(s, &yaw_matrix(self.yaw), |p| self.point_to_world(p))
    }
}

/// Rigidly move a state: the root orientation is premultiplied by `q`, and
/// per-frame deltas are recomputed from the moved previous frame so that they
/// stay consistent with the moved positions.
fn transform_state(s: &PoseState, q: &Mat3, place: impl Fn(&Vec3) -> Vec3) -> PoseState {
    let r = place(&s.r);
    let r_prev = place(&[s.r[0] - s.r_dot[0], s.r[1] - s.r_dot[1], s.r[2] - s.r_dot[2]]);
    let phi = log_map(&mat_mul(q, &rodrigues(&s.phi)));
    let phi_prev_raw = [s.phi[0] - s.phi_dot[0], s.phi[1] - s.phi_dot[1], s.phi[2] - s.phi_dot[2]];
    let phi_prev = nearest_equivalent(log_map(&mat_mul(q, &rodrigues(&phi_prev_raw))), &phi);
    PoseState {
        r,
        r_dot: [r[0] - r_prev[0], r[1] - r_prev[1], r[2] - r_prev[2]],
        phi,
        phi_dot: [phi[0] - phi_prev[0], phi[1] - phi_prev[1], phi[2] - phi_prev[2]],
        theta: s.theta,
        theta_dot: s.theta_dot,
    }
}
