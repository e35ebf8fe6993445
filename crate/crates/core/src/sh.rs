//! Real spherical-harmonic colour basis (degrees 0 to 3), with the sign
//! convention used by common Gaussian splatting implementations.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub const MAX_DEGREE: usize = 3;

pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree whose coefficient count is `n`, if any.
pub fn degree_for_coeffs(n: usize) -> Option<usize> {
    (0..=MAX_DEGREE).find(|&d| num_coeffs(d) == n)
}

/// Basis values at the unit direction `d`; entries past `num_coeffs(degree)` are zero.
pub fn basis(degree: usize, d: &Vector3<f64>) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis polynomial with respect to `(x, y, z)`.
pub fn basis_jacobian(degree: usize, d: &Vector3<f64>) -> [[f64; 3]; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut j = [[0.0; 3]; 16];
    if degree >= 1 {
        j[1] = [0.0, -SH_C1, 0.0];
        j[2] = [0.0, 0.0, SH_C1];
        j[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        j[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        j[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        j[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        j[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        j[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
        if degree >= 3 {
            j[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
            j[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
            j[11] = [
                SH_C3[2] * (-2.0 * x * y),
                SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
                SH_C3[2] * 8.0 * y * z,
            ];
            j[12] = [
                SH_C3[3] * (-6.0 * x * z),
                SH_C3[3] * (-6.0 * y * z),
                SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            j[13] = [
                SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
                SH_C3[4] * (-2.0 * x * y),
                SH_C3[4] * 8.0 * x * z,
            ];
            j[14] = [SH_C3[5] * 2.0 * x * z, SH_C3[5] * (-2.0 * y * z), SH_C3[5] * (xx - yy)];
            j[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * (-6.0 * x * y), 0.0];
        }
    }
    j
}

/// Colour seen along `view_dir`: SH expansion plus 0.5, clamped to `[0, 1]`.
///
/// Also returns, per channel, whether the value lies strictly inside the clamp
/// range (and hence passes gradients).
pub fn eval_sh_with_mask(coeffs: &[[f64; 3]], degree: usize, view_dir: &Vector3<f64>) -> ([f64; 3], [bool; 3]) {
    let b = basis(degree, view_dir);
    let mut raw = [0.5; 3];
    for (k, c) in coeffs.iter().enumerate().take(num_coeffs(degree)) {
        for ch in 0..3 {
            raw[ch] += b[k] * c[ch];
        }
    }
    let mut color = [0.0; 3];
    let mut inside = [false; 3];
    for ch in 0..3 {
        color[ch] = raw[ch].clamp(0.0, 1.0);
        inside[ch] = raw[ch] > 0.0 && raw[ch] < 1.0;
    }
    (color, inside)
}

pub fn eval_sh(coeffs: &[[f64; 3]], degree: usize, view_dir: &Vector3<f64>) -> [f64; 3] {
    eval_sh_with_mask(coeffs, degree, view_dir).0
}

/// DC coefficient that reproduces `color` independent of view direction.
pub fn rgb_to_dc(color: [f64; 3]) -> [f64; 3] {
    [
        (color[0] - 0.5) / SH_C0,
        (color[1] - 0.5) / SH_C0,
        (color[2] - 0.5) / SH_C0,
    ]
}
