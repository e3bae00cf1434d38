//! Small fixed-size vector helpers and axis-angle rotations.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Below this rotation angle the Rodrigues formula switches to its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-6;

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

#[inline]
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_add(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += b[i][j];
        }
    }
    out
}

pub fn mat_scale(a: &Mat3, s: f64) -> Mat3 {
    let mut out = *a;
    out.iter_mut().flatten().for_each(|x| *x *= s);
    out
}

pub fn skew(v: Vec3) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

/// Frobenius inner product `<a, b>`.
pub fn mat_inner(a: &Mat3, b: &Mat3) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            acc += a[i][j] * b[i][j];
        }
    }
    acc
}

/// Outer product `a b^T`.
pub fn outer(a: Vec3, b: Vec3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i] * b[j];
        }
    }
    out
}

/// Rotation matrix for an axis-angle vector.
pub fn rodrigues(v: Vec3) -> Mat3 {
    rotation_with_jacobian(v).0
}

/// Rotation matrix and its three partial derivatives with respect to the
/// axis-angle components.
pub fn rotation_with_jacobian(v: Vec3) -> (Mat3, [Mat3; 3]) {
    let theta = norm(v);
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let basis = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if theta < SMALL_ANGLE {
        // R ~ I + K + K^2 / 2
        let r = mat_add(&mat_add(&IDENTITY, &k), &mat_scale(&k2, 0.5));
        let d = basis.map(|e| {
            let ei = skew(e);
            let sym = mat_add(&mat_mul(&ei, &k), &mat_mul(&k, &ei));
            mat_add(&ei, &mat_scale(&sym, 0.5))
        });
        return (r, d);
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    let r = mat_add(&mat_add(&IDENTITY, &mat_scale(&k, a)), &mat_scale(&k2, b));
    // dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2
    let theta2 = theta * theta;
    let d = std::array::from_fn(|i| {
        let e = basis[i];
        let i_minus_r_e = sub(e, mat_vec(&r, e));
        let inner = mat_add(&mat_scale(&k, v[i]), &skew(cross(v, i_minus_r_e)));
        mat_scale(&mat_mul(&inner, &r), 1.0 / theta2)
    });
    (r, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quat_rotate(axis_angle: Vec3, p: Vec3) -> Vec3 {
        // Independent route: unit quaternion sandwich q p q*.
        let theta = norm(axis_angle);
        if theta == 0.0 {
            return p;
        }
        let u = scale(axis_angle, 1.0 / theta);
        let (s, c) = (theta / 2.0).sin_cos();
        let q = [c, u[0] * s, u[1] * s, u[2] * s];
        let qv = [q[1], q[2], q[3]];
        let t = scale(cross(qv, p), 2.0);
        add(add(p, scale(t, q[0])), cross(qv, t))
    }

    #[test]
    fn rodrigues_matches_quaternion() {
        let cases = [[0.3, 0.0, 0.0], [0.1, -0.7, 0.25], [2.0, 1.0, -1.5], [1e-8, 0.0, 2e-8]];
        let p = [0.3, -1.2, 0.7];
        for v in cases {
            let a = mat_vec(&rodrigues(v), p);
            let b = quat_rotate(v, p);
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12, "{v:?}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn rotation_derivative_matches_central_differences() {
        let h = 1e-6;
        for v in [[0.3, 0.2, -0.1], [0.0, 0.0, 0.0], [1.3, -0.4, 2.2], [3e-7, 0.0, 0.0]] {
            let (_, d) = rotation_with_jacobian(v);
            for (i, di) in d.iter().enumerate() {
                let mut vp = v;
                let mut vm = v;
                vp[i] += h;
                vm[i] -= h;
                let (rp, rm) = (rodrigues(vp), rodrigues(vm));
                for r in 0..3 {
                    for c in 0..3 {
                        let fd = (rp[r][c] - rm[r][c]) / (2.0 * h);
                        assert!((fd - di[r][c]).abs() < 1e-6, "v={v:?} i={i} ({r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rodrigues([0.4, -1.1, 0.9]);
        let rtr = mat_mul(&[
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ], &r);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rtr[i][j] - e).abs() < 1e-12);
            }
        }
    }
}
