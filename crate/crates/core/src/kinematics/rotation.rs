//! Axis-angle rotations.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// `a^T b`
pub fn mat_tmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[0][i] * b[0][j] + a[1][i] * b[1][j] + a[2][i] * b[2][j];
        }
    }
    out
}

/// `a b^T`
pub fn mat_mul_t(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[j][0] + a[i][1] * b[j][1] + a[i][2] * b[j][2];
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat_tvec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn skew(w: &Vec3) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

/// Coefficients `a = sin t / t`, `b = (1 - cos t) / t^2` and their
/// derivatives divided by `t`, with series expansions near zero.
fn coefficients(theta2: f64) -> (f64, f64, f64, f64) {
    if theta2 < 1e-6 {
        let a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0;
        let b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
        let da = -1.0 / 3.0 + theta2 / 30.0;
        let db = -1.0 / 12.0 + theta2 / 180.0;
        (a, b, da, db)
    } else {
        let t = theta2.sqrt();
        let (s, c) = t.sin_cos();
        let a = s / t;
        let b = (1.0 - c) / theta2;
        let da = (t * c - s) / (theta2 * t);
        let db = (t * s - 2.0 * (1.0 - c)) / (theta2 * theta2);
        (a, b, da, db)
    }
}

/// Rotation matrix of an axis-angle vector: `I + a K + b K^2`.
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, _, _) = coefficients(theta2);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Rotation matrix and its partial derivatives with respect to each
/// axis-angle component.
pub fn rodrigues_with_jacobian(w: &Vec3) -> (Mat3, [Mat3; 3]) {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, da, db) = coefficients(theta2);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    let mut jac = [[[0.0; 3]; 3]; 3];
    for (c, d) in jac.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let ek = skew(&e);
        let ekk = mat_mul(&ek, &k);
        let kek = mat_mul(&k, &ek);
        for i in 0..3 {
            for j in 0..3 {
                d[i][j] = da * w[c] * k[i][j]
                    + a * ek[i][j]
                    + db * w[c] * k2[i][j]
                    + b * (ekk[i][j] + kek[i][j]);
            }
        }
    }
    (r, jac)
}

/// Axis-angle vector of a rotation matrix, angle in `[0, pi]`.
pub fn log_map(r: &Mat3) -> Vec3 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let vee = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if angle < 1e-6 {
        let f = 0.5 * (1.0 + angle * angle / 6.0);
        return [vee[0] * f, vee[1] * f, vee[2] * f];
    }
    if std::f64::consts::PI - angle > 1e-4 {
        let f = angle / (2.0 * angle.sin());
        return [vee[0] * f, vee[1] * f, vee[2] * f];
    }
    // near pi: axis from the symmetric part, sign from the skew part
    let b = [
        ((r[0][0] - cos) / (1.0 - cos)).max(0.0).sqrt(),
        ((r[1][1] - cos) / (1.0 - cos)).max(0.0).sqrt(),
        ((r[2][2] - cos) / (1.0 - cos)).max(0.0).sqrt(),
    ];
    let k = (0..3).max_by(|&i, &j| b[i].total_cmp(&b[j])).unwrap();
    let mut axis = [0.0; 3];
    axis[k] = b[k];
    for i in 0..3 {
        if i != k {
            axis[i] = (r[i][k] + r[k][i]) / (2.0 * (1.0 - cos) * b[k]);
        }
    }
    if vee[k] < 0.0 {
        axis.iter_mut().for_each(|v| *v = -*v);
    }
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    [axis[0] / n * angle, axis[1] / n * angle, axis[2] / n * angle]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quat_rotate(w: &Vec3, v: &Vec3) -> Vec3 {
        // independent route: q v q*
        let angle = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if angle == 0.0 {
            return *v;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let q = [c, s * w[0] / angle, s * w[1] / angle, s * w[2] / angle];
        let mul = |a: [f64; 4], b: [f64; 4]| {
            [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ]
        };
        let conj = [q[0], -q[1], -q[2], -q[3]];
        let r = mul(mul(q, [0.0, v[0], v[1], v[2]]), conj);
        [r[1], r[2], r[3]]
    }

    #[test]
    fn zero_is_identity() {
        assert_eq!(rodrigues(&[0.0; 3]), IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues(&[0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let v = mat_vec(&r, &[1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_quaternion_route(w in prop::array::uniform3(-3.0f64..3.0), v in prop::array::uniform3(-1.0f64..1.0)) {
            let a = mat_vec(&rodrigues(&w), &v);
            let b = quat_rotate(&w, &v);
            for i in 0..3 {
                prop_assert!((a[i] - b[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn orthonormal(w in prop::array::uniform3(-6.0f64..6.0)) {
            let r = rodrigues(&w);
            let rtr = mat_tmul(&r, &r);
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((rtr[i][j] - e).abs() <= 1e-10);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            prop_assert!((det - 1.0).abs() < 1e-10);
        }

        #[test]
        fn log_inverts_exp(w in prop::array::uniform3(-1.8f64..1.8)) {
            let back = log_map(&rodrigues(&w));
            for i in 0..3 {
                prop_assert!((back[i] - w[i]).abs() < 1e-8, "{:?} vs {:?}", back, w);
            }
        }

        #[test]
        fn jacobian_matches_differences(w in prop::array::uniform3(-2.0f64..2.0)) {
            let (_, jac) = rodrigues_with_jacobian(&w);
            for c in 0..3 {
                let h = 1e-6;
                let mut wp = w;
                let mut wm = w;
                wp[c] += h;
                wm[c] -= h;
                let (rp, rm) = (rodrigues(&wp), rodrigues(&wm));
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                        prop_assert!((fd - jac[c][i][j]).abs() < 1e-7);
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_near_zero_uses_series() {
        let w = [1e-5, -2e-5, 3e-6];
        let (_, jac) = rodrigues_with_jacobian(&w);
        // at the origin dR/dw_c is the generator skew(e_c)
        assert!((jac[2][1][0] - 1.0).abs() < 1e-8);
        assert!((jac[2][0][1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn log_near_pi() {
        let w = [0.0, 0.0, std::f64::consts::PI - 1e-7];
        let back = log_map(&rodrigues(&w));
        assert!((back[2].abs() - w[2]).abs() < 1e-6);
        let v = [0.3, -0.5, 0.8];
        let n = (0.09f64 + 0.25 + 0.64).sqrt();
        let w2 = [v[0] / n * 3.14159, v[1] / n * 3.14159, v[2] / n * 3.14159];
        let r = rodrigues(&w2);
        let r2 = rodrigues(&log_map(&r));
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - r2[i][j]).abs() < 1e-6);
            }
        }
    }
}
