//! Axis-angle rotations and their first derivatives.

pub type Mat3 = [[f64; 3]; 3];

/// Below this angle the trigonometric coefficients switch to their Taylor
/// expansions; the truncation error is O(θ⁴) ≈ 1e-16.
const SMALL_ANGLE: f64 = 1e-4;

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Cross-product matrix `[w]ₓ` so that `[w]ₓ v = w × v`.
pub fn skew(w: [f64; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat_t_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn determinant(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Returns `(sin θ/θ, (1−cos θ)/θ², (θ−sin θ)/θ³)`.
fn coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

fn combine(a: f64, k: &Mat3, b: f64, k2: &Mat3) -> Mat3 {
    let mut out = identity();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// Rodrigues formula `R = I + a[ω]ₓ + b[ω]ₓ²`.
pub fn rodrigues(omega: [f64; 3]) -> Mat3 {
    let theta = crate::array::norm(&omega);
    let (a, b, _) = coefficients(theta);
    let k = skew(omega);
    combine(a, &k, b, &mat_mul(&k, &k))
}

/// Right Jacobian of SO(3): `R(ω + δ) ≈ R(ω)·Exp(J_r(ω) δ)`.
///
/// Hence `∂(R(ω) v)/∂ω = −R [v]ₓ J_r(ω)`.
pub fn right_jacobian(omega: [f64; 3]) -> Mat3 {
    let theta = crate::array::norm(&omega);
    let (_, b, c) = coefficients(theta);
    let k = skew(omega);
    combine(-b, &k, c, &mat_mul(&k, &k))
}
