//! Second-order real spherical harmonics lighting.
//!
//! Lighting is 27 coefficients, indexed `band * 3 + channel`, in the basis
//! order `Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::Vec3;

pub const SH_BANDS: usize = 9;
pub const LIGHTING_LEN: usize = 27;
const UNIT_TOL: f64 = 1e-6;

struct Constants {
    c0: f64,
    c1: f64,
    c2: f64,
    c20: f64,
    c22: f64,
}

fn constants() -> Constants {
    Constants {
        c0: 0.5 * (1.0 / PI).sqrt(),
        c1: (3.0 / (4.0 * PI)).sqrt(),
        c2: 0.5 * (15.0 / PI).sqrt(),
        c20: 0.25 * (5.0 / PI).sqrt(),
        c22: 0.25 * (15.0 / PI).sqrt(),
    }
}

/// The nine basis functions evaluated at a unit direction.
pub fn sh_basis(n: Vec3) -> [f64; SH_BANDS] {
    let k = constants();
    let [x, y, z] = n;
    [
        k.c0,
        k.c1 * y,
        k.c1 * z,
        k.c1 * x,
        k.c2 * x * y,
        k.c2 * y * z,
        k.c20 * (3.0 * z * z - 1.0),
        k.c2 * x * z,
        k.c22 * (x * x - y * y),
    ]
}

/// Partial derivatives of each basis function with respect to `(x, y, z)`.
pub fn sh_basis_grad(n: Vec3) -> [Vec3; SH_BANDS] {
    let k = constants();
    let [x, y, z] = n;
    [
        [0.0, 0.0, 0.0],
        [0.0, k.c1, 0.0],
        [0.0, 0.0, k.c1],
        [k.c1, 0.0, 0.0],
        [k.c2 * y, k.c2 * x, 0.0],
        [0.0, k.c2 * z, k.c2 * y],
        [0.0, 0.0, 6.0 * k.c20 * z],
        [k.c2 * z, 0.0, k.c2 * x],
        [2.0 * k.c22 * x, -2.0 * k.c22 * y, 0.0],
    ]
}

/// Irradiance without the unit-length check, for normals already normalized.
pub(crate) fn shade(lighting: &[f64], n: Vec3) -> Vec3 {
    let basis = sh_basis(n);
    let mut out = [0.0; 3];
    for (band, y) in basis.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += lighting[band * 3 + c] * y;
        }
    }
    out
}

/// Per-channel irradiance for a unit normal.
pub fn sh_irradiance(lighting: &[f64], normal: Vec3) -> Result<Vec3> {
    if lighting.len() != LIGHTING_LEN {
        return Err(Error::Param(format!(
            "lighting has {} coefficients, expected {LIGHTING_LEN}",
            lighting.len()
        )));
    }
    let len = crate::linalg::norm(normal);
    if !len.is_finite() || (len - 1.0).abs() > UNIT_TOL {
        return Err(Error::Numeric(format!("normal {normal:?} is not unit length")));
    }
    Ok(shade(lighting, normal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ambient_only_is_direction_independent() {
        let c = 0.7;
        let mut l = vec![0.0; 27];
        l[..3].copy_from_slice(&[c, c, c]);
        let y00 = 0.5 * (1.0 / std::f64::consts::PI).sqrt();
        for n in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.6, 0.0, -0.8]] {
            let e = sh_irradiance(&l, n).unwrap();
            for ch in e {
                assert!((ch - c * y00).abs() < 1e-15);
                assert!((ch - c * 0.282095).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_lighting_is_black() {
        assert_eq!(sh_irradiance(&[0.0; 27], [0.0, 1.0, 0.0]).unwrap(), [0.0; 3]);
    }

    #[test]
    fn z_band_flips_with_normal() {
        let mut l = vec![0.0; 27];
        l[2 * 3] = 0.4;
        l[2 * 3 + 1] = -0.2;
        l[2 * 3 + 2] = 1.3;
        let up = sh_irradiance(&l, [0.0, 0.0, 1.0]).unwrap();
        let down = sh_irradiance(&l, [0.0, 0.0, -1.0]).unwrap();
        for c in 0..3 {
            assert_eq!(up[c], -down[c]);
            assert!(up[c] != 0.0);
        }
    }

    #[test]
    fn non_unit_normal_is_rejected() {
        assert!(matches!(sh_irradiance(&[0.0; 27], [0.0, 0.0, 2.0]), Err(Error::Numeric(_))));
        assert!(sh_irradiance(&[0.0; 26], [0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let n = [0.3, -0.5, 0.81];
        let g = sh_basis_grad(n);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = n;
            let mut m = n;
            p[axis] += h;
            m[axis] -= h;
            let (bp, bm) = (sh_basis(p), sh_basis(m));
            for band in 0..SH_BANDS {
                let fd = (bp[band] - bm[band]) / (2.0 * h);
                assert!((fd - g[band][axis]).abs() < 1e-8);
            }
        }
    }
}
