//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Coefficients are stored coefficient-major with the color channel
//! innermost: `coeffs[k * 3 + channel]` multiplies basis function `k`.
//! The sign convention of the basis follows the common Gaussian-splatting
//! lineage, so degree-1 terms are `-C1·y`, `C1·z`, `-C1·x`.

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Constant value of the degree-0 basis function.
pub const DC_BASIS: f64 = C0;

/// Offset added to the raw SH sum before clamping.
pub const COLOR_OFFSET: f64 = 0.5;

/// Number of basis functions for a degree, `(L+1)²`.
pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluates every basis function up to `degree` at the unit vector `dir`.
/// Entries past `coeff_count(degree)` are left untouched.
pub fn basis(degree: usize, dir: [f64; 3], out: &mut [f64; 16]) {
    let [x, y, z] = dir;
    out[0] = C0;
    if degree == 0 {
        return;
    }
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = C2[0] * x * y;
    out[5] = C2[1] * y * z;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * x * z;
    out[8] = C2[4] * (xx - yy);
    if degree == 2 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * x * y * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
}

/// Partial derivatives of each basis polynomial with respect to the raw
/// (x, y, z) components, evaluated at `dir`.
pub fn basis_grad(degree: usize, dir: [f64; 3], out: &mut [[f64; 3]; 16]) {
    let [x, y, z] = dir;
    out[0] = [0.0; 3];
    if degree == 0 {
        return;
    }
    out[1] = [0.0, -C1, 0.0];
    out[2] = [0.0, 0.0, C1];
    out[3] = [-C1, 0.0, 0.0];
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = [C2[0] * y, C2[0] * x, 0.0];
    out[5] = [0.0, C2[1] * z, C2[1] * y];
    out[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
    out[7] = [C2[3] * z, 0.0, C2[3] * x];
    out[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    if degree == 2 {
        return;
    }
    out[9] = [
        C3[0] * 6.0 * x * y,
        C3[0] * (3.0 * xx - 3.0 * yy),
        0.0,
    ];
    out[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
    out[11] = [
        -2.0 * C3[2] * x * y,
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * C3[2] * y * z,
    ];
    out[12] = [
        -6.0 * C3[3] * x * z,
        -6.0 * C3[3] * y * z,
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    out[13] = [
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * C3[4] * x * y,
        8.0 * C3[4] * x * z,
    ];
    out[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
    out[15] = [
        C3[6] * (3.0 * xx - 3.0 * yy),
        -6.0 * C3[6] * x * y,
        0.0,
    ];
}

/// Unclamped color `Σ c_k·Y_k + 0.5` given precomputed basis values.
pub(crate) fn raw_color(coeffs: &[f64], basis: &[f64; 16], count: usize) -> [f64; 3] {
    let mut color = [COLOR_OFFSET; 3];
    for (k, &y) in basis.iter().enumerate().take(count) {
        for (ch, c) in color.iter_mut().enumerate() {
            *c += coeffs[k * 3 + ch] * y;
        }
    }
    color
}

/// View-dependent RGB color of one Gaussian, clamped below at zero.
pub fn eval_sh_color(coeffs: &[f64], view_dir: [f64; 3], degree: usize) -> Result<[f64; 3]> {
    if degree > MAX_DEGREE {
        return Err(Error::InvalidInput(format!(
            "SH degree {degree} exceeds maximum {MAX_DEGREE}"
        )));
    }
    let count = coeff_count(degree);
    if coeffs.len() != 3 * count {
        return Err(Error::Shape(format!(
            "degree {degree} needs {} SH coefficients, got {}",
            3 * count,
            coeffs.len()
        )));
    }
    let mut b = [0.0; 16];
    basis(degree, view_dir, &mut b);
    Ok(raw_color(coeffs, &b, count).map(|c| c.max(0.0)))
}

/// Inverse of the DC mapping: the degree-0 coefficient that yields `color`.
pub fn rgb_to_dc(color: f64) -> f64 {
    (color - COLOR_OFFSET) / C0
}
