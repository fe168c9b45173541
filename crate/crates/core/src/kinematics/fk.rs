//! Forward kinematics and its vector-Jacobian product.

use super::body::{
    shape_to_bone_scales, BodyShape, KinematicTree, Observation3D, PoseState, NUM_BODY_JOINTS, NUM_JOINTS,
    NUM_MARKERS, OBS_DIM, PHI, R, STATE_DIM, THETA,
};
use super::rotation::{mat_mul, mat_mul_t, mat_tmul, mat_vec, rodrigues_with_jacobian, Mat3, Vec3};
use crate::diffmath::{CustomOp, Graph, Tensor, Var};

/// Intermediate quantities of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FkFrames {
    pub world_rot: [Mat3; NUM_JOINTS],
    pub joints: [Vec3; NUM_JOINTS],
    pub markers: [Vec3; NUM_MARKERS],
    local_rot: [Mat3; NUM_JOINTS],
    local_jac: [[Mat3; 3]; NUM_JOINTS],
    scaled_offsets: [Vec3; NUM_JOINTS],
}

/// Forward pass from translation, root rotation matrix and body axis-angles.
/// `root_jac` carries `dR_root/dw` when the root rotation is itself an
/// axis-angle vector.
pub fn fk_frames(
    tree: &KinematicTree,
    scales: &[f64; NUM_JOINTS],
    r: &Vec3,
    root_rot: &Mat3,
    root_jac: [Mat3; 3],
    theta: &[Vec3],
) -> FkFrames {
    let mut world_rot = [[[0.0; 3]; 3]; NUM_JOINTS];
    let mut joints = [[0.0; 3]; NUM_JOINTS];
    let mut local_rot = [[[0.0; 3]; 3]; NUM_JOINTS];
    let mut local_jac = [[[[0.0; 3]; 3]; 3]; NUM_JOINTS];
    let mut scaled_offsets = [[0.0; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let o = tree.offsets[j];
        scaled_offsets[j] = [o[0] * scales[j], o[1] * scales[j], o[2] * scales[j]];
    }

    local_rot[0] = *root_rot;
    local_jac[0] = root_jac;
    world_rot[0] = *root_rot;
    let d = mat_vec(root_rot, &scaled_offsets[0]);
    joints[0] = [r[0] + d[0], r[1] + d[1], r[2] + d[2]];

    for j in 1..NUM_JOINTS {
        let p = tree.parents[j] as usize;
        let (rot, jac) = rodrigues_with_jacobian(&theta[j - 1]);
        local_rot[j] = rot;
        local_jac[j] = jac;
        world_rot[j] = mat_mul(&world_rot[p], &rot);
        let d = mat_vec(&world_rot[p], &scaled_offsets[j]);
        joints[j] = [joints[p][0] + d[0], joints[p][1] + d[1], joints[p][2] + d[2]];
    }

    let mut markers = [[0.0; 3]; NUM_MARKERS];
    for (m, (seg, off)) in tree.markers.iter().enumerate() {
        let d = mat_vec(&world_rot[*seg], off);
        let base = joints[*seg];
        markers[m] = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
    }

    FkFrames {
        world_rot,
        joints,
        markers,
        local_rot,
        local_jac,
        scaled_offsets,
    }
}

/// Gradients flowing back from point positions.
#[derive(Clone, Debug)]
pub struct FkGrad {
    pub r: Vec3,
    /// Gradient with respect to the root rotation matrix.
    pub root_rot: Mat3,
    /// Gradient with respect to the root axis-angle (via the frames' root Jacobian).
    pub phi: Vec3,
    pub theta: [Vec3; NUM_BODY_JOINTS],
}

fn outer_add(acc: &mut Mat3, g: &Vec3, v: &Vec3) {
    for i in 0..3 {
        for j in 0..3 {
            acc[i][j] += g[i] * v[j];
        }
    }
}

fn frob(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += a[i][j] * b[i][j];
        }
    }
    s
}

/// Vector-Jacobian product of [`fk_frames`] given `dL/d joints` and
/// `dL/d markers`.
pub fn fk_vjp(tree: &KinematicTree, frames: &FkFrames, d_joints: &[Vec3], d_markers: &[Vec3]) -> FkGrad {
    let mut gp: [Vec3; NUM_JOINTS] = [[0.0; 3]; NUM_JOINTS];
    gp.copy_from_slice(d_joints);
    let mut gr = [[[0.0; 3]; 3]; NUM_JOINTS];

    for ((seg, off), g) in tree.markers.iter().zip(d_markers) {
        for k in 0..3 {
            gp[*seg][k] += g[k];
        }
        outer_add(&mut gr[*seg], g, off);
    }

    let mut theta = [[0.0; 3]; NUM_BODY_JOINTS];
    for j in (1..NUM_JOINTS).rev() {
        let p = tree.parents[j] as usize;
        let gj = gp[j];
        for k in 0..3 {
            gp[p][k] += gj[k];
        }
        outer_add(&mut gr[p], &gj, &frames.scaled_offsets[j]);
        // world_rot[j] = world_rot[p] * local_rot[j]
        let back = mat_mul_t(&gr[j], &frames.local_rot[j]);
        for a in 0..3 {
            for b in 0..3 {
                gr[p][a][b] += back[a][b];
            }
        }
        let g_local = mat_tmul(&frames.world_rot[p], &gr[j]);
        for c in 0..3 {
            theta[j - 1][c] = frob(&g_local, &frames.local_jac[j][c]);
        }
    }

    let mut root_rot = gr[0];
    outer_add(&mut root_rot, &gp[0], &frames.scaled_offsets[0]);
    let phi = [
        frob(&root_rot, &frames.local_jac[0][0]),
        frob(&root_rot, &frames.local_jac[0][1]),
        frob(&root_rot, &frames.local_jac[0][2]),
    ];
    FkGrad {
        r: gp[0],
        root_rot,
        phi,
        theta,
    }
}

fn state_frames(tree: &KinematicTree, scales: &[f64; NUM_JOINTS], state: &[f64]) -> FkFrames {
    let r = [state[R], state[R + 1], state[R + 2]];
    let phi = [state[PHI], state[PHI + 1], state[PHI + 2]];
    let theta: Vec<Vec3> = (0..NUM_BODY_JOINTS)
        .map(|j| [state[THETA + 3 * j], state[THETA + 3 * j + 1], state[THETA + 3 * j + 2]])
        .collect();
    let (root, jac) = rodrigues_with_jacobian(&phi);
    fk_frames(tree, scales, &r, &root, jac, &theta)
}

/// Joint and marker positions of a state; velocity entries are ignored.
pub fn forward_kinematics(state: &PoseState, shape: &BodyShape) -> Observation3D {
    forward_kinematics_with(KinematicTree::mini_body(), state, &shape_to_bone_scales(shape))
}

pub fn forward_kinematics_with(tree: &KinematicTree, state: &PoseState, scales: &[f64; NUM_JOINTS]) -> Observation3D {
    let f = state_frames(tree, scales, &state.to_vec());
    Observation3D {
        joints: f.joints.to_vec(),
        markers: f.markers.to_vec(),
    }
}

/// Flat 195-vector of points for a flat 138-vector state.
pub fn fk_flat(scales: &[f64; NUM_JOINTS], state: &[f64]) -> Vec<f64> {
    let f = state_frames(KinematicTree::mini_body(), scales, state);
    f.joints.iter().chain(f.markers.iter()).flatten().copied().collect()
}

struct FkOp {
    frames: Vec<FkFrames>,
}

impl CustomOp for FkOp {
    fn name(&self) -> &'static str {
        "forward_kinematics"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let tree = KinematicTree::mini_body();
        let rows = inputs[0].rows();
        let mut out = vec![0.0; rows * STATE_DIM];
        for (row, frames) in self.frames.iter().enumerate() {
            let g = grad.row_slice(row);
            let pts: Vec<Vec3> = g.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let fg = fk_vjp(tree, frames, &pts[..NUM_JOINTS], &pts[NUM_JOINTS..]);
            let dst = &mut out[row * STATE_DIM..(row + 1) * STATE_DIM];
            dst[R..R + 3].copy_from_slice(&fg.r);
            dst[PHI..PHI + 3].copy_from_slice(&fg.phi);
            for j in 0..NUM_BODY_JOINTS {
                dst[THETA + 3 * j..THETA + 3 * j + 3].copy_from_slice(&fg.theta[j]);
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).unwrap())]
    }
}

/// Recorded forward kinematics on a `batch x 138` state node, one bone-scale
/// vector per row. Output is `batch x 195`.
pub fn fk_node(g: &mut Graph, states: Var, scales: &[[f64; NUM_JOINTS]]) -> Var {
    let tree = KinematicTree::mini_body();
    let input = g.value(states);
    assert_eq!(input.cols(), STATE_DIM);
    assert_eq!(input.rows(), scales.len(), "one scale vector per row");
    let mut frames = Vec::with_capacity(scales.len());
    let mut values = Vec::with_capacity(scales.len() * OBS_DIM);
    for (row, s) in scales.iter().enumerate() {
        let f = state_frames(tree, s, input.row_slice(row));
        values.extend(f.joints.iter().chain(f.markers.iter()).flatten());
        frames.push(f);
    }
    let out = Tensor::matrix(scales.len(), OBS_DIM, values).unwrap();
    g.custom(&[states], out, Box::new(FkOp { frames }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::rotation::{rodrigues, IDENTITY};
    use proptest::prelude::*;

    fn random_state(seed: u64) -> PoseState {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..STATE_DIM).map(|_| rng.gen_range(-0.8..0.8)).collect();
        PoseState::from_slice(&v).unwrap()
    }

    #[test]
    fn zero_pose_is_cumulative_offsets() {
        let obs = forward_kinematics(&PoseState::default(), &BodyShape::default());
        let tree = KinematicTree::mini_body();
        for j in 0..NUM_JOINTS {
            let mut expect = [0.0; 3];
            let mut k = Some(j);
            while let Some(i) = k {
                for c in 0..3 {
                    expect[c] += tree.offsets[i][c];
                }
                k = tree.parent(i);
            }
            for c in 0..3 {
                assert!((obs.joints[j][c] - expect[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn translation_shifts_every_point() {
        let mut s = random_state(1);
        let shape = BodyShape::new([0.5; 10]);
        let a = forward_kinematics(&s, &shape);
        let d = [0.3, -1.2, 2.5];
        for c in 0..3 {
            s.r[c] += d[c];
        }
        let b = forward_kinematics(&s, &shape);
        for (p, q) in a.points().zip(b.points()) {
            for c in 0..3 {
                assert!((q[c] - p[c] - d[c]).abs() < 1e-12);
            }
        }
    }

    type H = [[f64; 4]; 4];

    fn h_mul(x: &H, y: &H) -> H {
        let mut o = [[0.0; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                o[a][b] = (0..4).map(|k| x[a][k] * y[k][b]).sum();
            }
        }
        o
    }

    fn h_from(rot: &Mat3, t: &Vec3) -> H {
        let mut m = [[0.0; 4]; 4];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] = rot[a][b];
            }
            m[a][3] = t[a];
        }
        m[3][3] = 1.0;
        m
    }

    #[test]
    fn root_half_turn_about_z() {
        // independent chain of homogeneous transforms: M_j = M_parent * Trans(off_j) * Rot_j
        let tree = KinematicTree::mini_body();
        let zero = forward_kinematics(&PoseState::default(), &BodyShape::default());
        let mut s = PoseState::default();
        s.phi = [0.0, 0.0, std::f64::consts::PI];
        let turned = forward_kinematics(&s, &BodyShape::default());
        let rz = rodrigues(&s.phi);
        let mut world: Vec<H> = Vec::new();
        for j in 0..NUM_JOINTS {
            let m = match tree.parent(j) {
                None => h_mul(&h_from(&rz, &[0.0; 3]), &h_from(&IDENTITY, &tree.offsets[0])),
                Some(p) => h_mul(&world[p], &h_from(&IDENTITY, &tree.offsets[j])),
            };
            for c in 0..3 {
                assert!((turned.joints[j][c] - m[c][3]).abs() < 1e-12);
            }
            world.push(m);
        }
        for (a, b) in zero.points().zip(turned.points()) {
            assert!((b[0] + a[0]).abs() < 1e-12 && (b[1] + a[1]).abs() < 1e-12 && (b[2] - a[2]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn markers_are_rigid(seed in 0u64..1000) {
            let s = random_state(seed);
            let shape = BodyShape::new([1.0; 10]);
            let obs = forward_kinematics(&s, &shape);
            let tree = KinematicTree::mini_body();
            for (m, (seg, off)) in tree.markers.iter().enumerate() {
                let d: f64 = (0..3).map(|c| (obs.markers[m][c] - obs.joints[*seg][c]).powi(2)).sum::<f64>().sqrt();
                let rest = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
                prop_assert!((d - rest).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let s = random_state(7).to_vec();
        let scales = shape_to_bone_scales(&BodyShape::new([-1.0; 10]));
        // random linear functional of the points
        let w: Vec<f64> = (0..OBS_DIM).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let f = |x: &[f64]| -> f64 { fk_flat(&scales, x).iter().zip(&w).map(|(a, b)| a * b).sum() };
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(s.clone()));
        let y = fk_node(&mut g, x, &[scales]);
        let wc = g.constant(Tensor::row(w.clone()));
        let prod = g.mul(y, wc);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().values().to_vec();
        let eps = 1e-5;
        for i in 0..STATE_DIM {
            let mut xp = s.clone();
            let mut xm = s.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "coordinate {i}: fd {fd} analytic {}", analytic[i]);
        }
    }
}
