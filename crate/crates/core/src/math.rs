//! Small fixed-size linear algebra and scalar helpers.
//!
//! Row-major `[[f64; 3]; 3]` matrices and `[f64; 3]` vectors keep the hot
//! loops allocation-free. Quaternions are scalar-first `[w, x, y, z]`.

pub type V3 = [f64; 3];
pub type M3 = [[f64; 3]; 3];

#[inline]
pub fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm2(a: V3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: V3) -> f64 {
    libm::sqrt(norm2(a))
}

#[inline]
pub fn mat_vec(m: &M3, v: V3) -> V3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// `mᵀ · v`
#[inline]
pub fn mat_tvec(m: &M3, v: V3) -> V3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

#[inline]
pub fn transpose(m: &M3) -> M3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub const IDENTITY: M3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn quat_norm(q: [f64; 4]) -> f64 {
    libm::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
}

#[inline]
pub fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
#[inline]
pub fn quat_to_rot(q: [f64; 4]) -> M3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Partial derivatives of `quat_to_rot` with respect to each component of a
/// unit quaternion, in `[w, x, y, z]` order. Callers chain these with the
/// projection through quaternion normalization.
pub fn quat_rot_jacobian(q: [f64; 4]) -> [M3; 4] {
    let [w, x, y, z] = q;
    let dw = [
        [0.0, -2.0 * z, 2.0 * y],
        [2.0 * z, 0.0, -2.0 * x],
        [-2.0 * y, 2.0 * x, 0.0],
    ];
    let dx = [
        [0.0, 2.0 * y, 2.0 * z],
        [2.0 * y, -4.0 * x, -2.0 * w],
        [2.0 * z, 2.0 * w, -4.0 * x],
    ];
    let dy = [
        [-4.0 * y, 2.0 * x, 2.0 * w],
        [2.0 * x, 0.0, 2.0 * z],
        [-2.0 * w, 2.0 * z, -4.0 * y],
    ];
    let dz = [
        [-4.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * w, -4.0 * z, 2.0 * y],
        [2.0 * x, 2.0 * y, 0.0],
    ];
    [dw, dx, dy, dz]
}

/// Rotation about an axis (0 = x, 1 = y, 2 = z) by `angle` radians.
pub fn axis_rotation(axis: usize, angle: f64) -> M3 {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

/// Fast exp for the render/backward hot paths: Cody-Waite range reduction
/// and a degree-11 Taylor kernel, within ~4 ulp of libm over the full finite
/// range. Bit-deterministic across platforms like everything else here.
pub fn fexp(x: f64) -> f64 {
    const LOG2E: f64 = 1.442695040888963407359924681;
    const LN2_HI: f64 = 0.693147180369123816490;
    const LN2_LO: f64 = 1.90821492927058770002e-10;
    if x != x {
        return x;
    }
    if x > 709.782712893384 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    let kf = libm::round(x * LOG2E);
    let k = kf as i64;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // exp(r) for |r| <= ln(2)/2, Taylor to r^11 (truncation ~2e-15 rel).
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362880.0
                                            + r * (1.0 / 3628800.0
                                                + r * (1.0 / 39916800.0)))))))))));
    // Scale by 2^k, splitting for subnormal results.
    if k >= -1021 {
        let bits = ((k + 1023) as u64) << 52;
        p * f64::from_bits(bits)
    } else {
        let bits = ((k + 1023 + 512) as u64) << 52;
        p * f64::from_bits(bits) * f64::from_bits(((1023u64 - 512) << 52) as u64)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    libm::log(p / (1.0 - p))
}

#[inline]
pub fn det3(m: &M3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quat_identity_is_identity_matrix() {
        let r = quat_to_rot([1.0, 0.0, 0.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((r[i][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quat_90deg_about_z() {
        // q = (cos 45°, 0, 0, sin 45°) rotates x into y.
        let h = core::f64::consts::FRAC_1_SQRT_2;
        let r = quat_to_rot([h, 0.0, 0.0, h]);
        let v = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    #[test]
    fn quat_jacobian_matches_finite_differences() {
        let q = quat_normalize([0.9, -0.2, 0.3, 0.1]);
        let jac = quat_rot_jacobian(q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            // Raw (un-normalized) perturbation of the formula itself.
            let rp = quat_to_rot(qp);
            let rm = quat_to_rot(qm);
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                    assert!(
                        (fd - jac[k][i][j]).abs() < 1e-8,
                        "dR/dq[{k}][{i}][{j}]: fd {fd} vs {got}",
                        got = jac[k][i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn fexp_matches_libm_closely() {
        // Dense sweep over the range the renderer uses, plus edges.
        let mut worst = 0.0f64;
        let mut x = -60.0;
        while x <= 5.0 {
            let a = fexp(x);
            let b = libm::exp(x);
            let rel = ((a - b) / b).abs();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 5e-14, "worst rel {worst}");
        assert_eq!(fexp(0.0), 1.0);
        assert_eq!(fexp(f64::NEG_INFINITY), 0.0);
        assert_eq!(fexp(-1000.0), 0.0);
        assert!(fexp(800.0).is_infinite());
        assert!(fexp(f64::NAN).is_nan());
        // Subnormal-range scaling stays finite and ordered.
        let tiny = fexp(-744.0);
        assert!(tiny > 0.0 && tiny < 1e-300);
    }

    #[test]
    fn sigmoid_logit_roundtrip() {
        for &p in &[0.01, 0.5, 0.99, 0.999] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }
}
