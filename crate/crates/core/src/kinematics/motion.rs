use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::body::{PoseState, NUM_BODY_JOINTS};
use super::rotation::Vec3;
use crate::error::{Error, Result};

/// Raw per-frame parameters: translation, root orientation, body pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPose {
    pub r: Vec3,
    pub phi: Vec3,
    pub theta: [Vec3; NUM_BODY_JOINTS],
}

impl Default for RawPose {
    fn default() -> Self {
        Self {
            r: [0.0; 3],
            phi: [0.0; 3],
            theta: [[0.0; 3]; NUM_BODY_JOINTS],
        }
    }
}

impl RawPose {
    pub fn from_state(s: &PoseState) -> Self {
        Self {
            r: s.r,
            phi: s.phi,
            theta: s.theta,
        }
    }
}

fn diff(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Attach per-frame finite-difference velocities. Frame 0 gets zero velocity.
///
/// `_fps` is accepted for interface symmetry; velocities are per-frame deltas.
pub fn compute_velocities(frames: &[RawPose], _fps: f64) -> Result<Vec<PoseState>> {
    if frames.is_empty() {
        return Err(Error::Invalid("cannot compute velocities of an empty sequence".into()));
    }
    let mut out = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let mut s = PoseState {
            r: f.r,
            phi: f.phi,
            theta: f.theta,
            ..Default::default()
        };
        if t > 0 {
            let p = &frames[t - 1];
            s.r_dot = diff(&f.r, &p.r);
            s.phi_dot = diff(&f.phi, &p.phi);
            for j in 0..NUM_BODY_JOINTS {
                s.theta_dot[j] = diff(&f.theta[j], &p.theta[j]);
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Add i.i.d. `N(0, sigma^2)` to every body-joint axis-angle component (and
/// the root orientation when `include_root`). Translations are untouched.
pub fn inject_pose_noise(frames: &[RawPose], sigma: f64, seed: u64, include_root: bool) -> Result<Vec<RawPose>> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(frames.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(frames
        .iter()
        .map(|f| {
            let mut g = f.clone();
            if include_root {
                g.phi.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            for j in g.theta.iter_mut() {
                j.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            g
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Vec<RawPose> {
        (0..n)
            .map(|t| {
                let mut f = RawPose::default();
                f.r = [t as f64, 0.0, 0.0];
                f.theta[3] = [0.1 * t as f64, -0.05 * (t * t) as f64, 0.0];
                f
            })
            .collect()
    }

    #[test]
    fn empty_sequence_is_an_error() {
        assert!(compute_velocities(&[], 30.0).is_err());
    }

    #[test]
    fn static_pose_has_zero_velocity() {
        let f = RawPose {
            r: [1.0, 2.0, 3.0],
            ..Default::default()
        };
        let s = compute_velocities(&vec![f; 5], 30.0).unwrap();
        assert!(s.iter().all(|p| p.r_dot == [0.0; 3] && p.theta_dot.iter().all(|v| *v == [0.0; 3])));
    }

    #[test]
    fn linear_translation_has_unit_velocity() {
        let s = compute_velocities(&ramp(6), 30.0).unwrap();
        assert_eq!(s[0].r_dot, [0.0; 3]);
        for p in &s[1..] {
            assert_eq!(p.r_dot, [1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn integrating_velocities_recovers_frames() {
        let frames = ramp(8);
        let s = compute_velocities(&frames, 30.0).unwrap();
        let mut acc = s[0].theta[3];
        for t in 1..frames.len() {
            for c in 0..3 {
                acc[c] += s[t].theta_dot[3][c];
            }
            for c in 0..3 {
                assert!((acc[c] - frames[t].theta[3][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_sigma_is_identity_and_seed_is_deterministic() {
        let frames = ramp(4);
        assert_eq!(inject_pose_noise(&frames, 0.0, 1, true).unwrap(), frames);
        let a = inject_pose_noise(&frames, 0.1, 3, true).unwrap();
        let b = inject_pose_noise(&frames, 0.1, 3, true).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(&frames).all(|(x, y)| x.r == y.r));
        assert!(inject_pose_noise(&frames, -1.0, 3, true).is_err());
    }

    #[test]
    fn root_flag_controls_orientation_noise() {
        let frames = ramp(4);
        let a = inject_pose_noise(&frames, 0.2, 3, false).unwrap();
        assert!(a.iter().zip(&frames).all(|(x, y)| x.phi == y.phi));
        let b = inject_pose_noise(&frames, 0.2, 3, true).unwrap();
        assert!(b.iter().zip(&frames).any(|(x, y)| x.phi != y.phi));
    }
}
