//! Real spherical harmonics up to degree 3 for view-dependent color.

use crate::error::{Error, Result};
use crate::math::{Rgb, Vec3};

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] =
    [1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396];
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

pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn degree_from_len(len: usize) -> Result<usize> {
    match len {
        1 => Ok(0),
        4 => Ok(1),
        9 => Ok(2),
        16 => Ok(3),
        // report the smallest degree that would need more coefficients
        n => Err(Error::UnsupportedShDegree(((n as f64).sqrt().ceil() as usize).saturating_sub(1))),
    }
}

/// Basis values `Y_b(dir)` for all bands up to `degree`.
pub fn basis(degree: usize, dir: &Vec3) -> Result<[f64; 16]> {
    if degree > MAX_DEGREE {
        return Err(Error::UnsupportedShDegree(degree));
    }
    let mut out = [0.0; 16];
    out[0] = SH_C0;
    if degree == 0 {
        return Ok(out);
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree == 1 {
        return Ok(out);
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = SH_C2[0] * xy;
    out[5] = SH_C2[1] * yz;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * xz;
    out[8] = SH_C2[4] * (xx - yy);
    if degree == 2 {
        return Ok(out);
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * xy * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    Ok(out)
}

/// Raw band sum plus the 0.5 offset, before clamping.
pub fn sh_eval_unclamped(sh: &[Rgb], view_dir: &Vec3) -> Result<Rgb> {
    let degree = degree_from_len(sh.len())?;
    let y = basis(degree, view_dir)?;
    let mut rgb = [0.5; 3];
    for (b, coeff) in sh.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += y[b] * coeff[ch];
        }
    }
    Ok(rgb)
}

/// View-dependent color, clamped at zero per channel.
pub fn sh_eval(sh: &[Rgb], view_dir: &Vec3) -> Result<Rgb> {
    Ok(sh_eval_unclamped(sh, view_dir)?.map(|v| v.max(0.0)))
}

/// Accumulates `dL/dcolor` into coefficient gradients. Channels clamped at
/// zero in the forward pass receive no gradient.
pub fn sh_backward(sh: &[Rgb], view_dir: &Vec3, dl_dcolor: &Rgb, dsh: &mut [Rgb]) -> Result<()> {
    let degree = degree_from_len(sh.len())?;
    let raw = sh_eval_unclamped(sh, view_dir)?;
    let y = basis(degree, view_dir)?;
    for ch in 0..3 {
        if raw[ch] < 0.0 {
            continue;
        }
        for b in 0..sh.len() {
            dsh[b][ch] += y[b] * dl_dcolor[ch];
        }
    }
    Ok(())
}

/// DC coefficient that reproduces `rgb` for every view direction.
pub fn rgb_to_dc(rgb: Rgb) -> Rgb {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degree_zero_is_constant() {
        let f = 0.7;
        let rgb = sh_eval(&[[f, -f, 0.0]], &Vec3::new(0.0, 0.6, 0.8)).unwrap();
        assert!((rgb[0] - (0.5 + 0.2820947918 * f)).abs() < 1e-10);
        assert!((rgb[1] - (0.5 - 0.2820947918 * f)).abs() < 1e-10);
        assert_eq!(rgb[2], 0.5);
    }

    #[test]
    fn zero_coefficients_give_gray() {
        for deg in 0..=3 {
            let sh = vec![[0.0; 3]; coeff_count(deg)];
            assert_eq!(sh_eval(&sh, &Vec3::x()).unwrap(), [0.5; 3]);
        }
    }

    #[test]
    fn unsupported_degree() {
        assert!(matches!(basis(4, &Vec3::x()), Err(Error::UnsupportedShDegree(4))));
        assert!(sh_eval(&vec![[0.0; 3]; 25], &Vec3::x()).is_err());
        assert!(sh_eval(&[[0.0; 3]; 5], &Vec3::x()).is_err());
    }

    #[test]
    fn clamps_at_zero() {
        let rgb = sh_eval(&[[-10.0, 0.0, 0.0]], &Vec3::z()).unwrap();
        assert_eq!(rgb[0], 0.0);
    }

    #[test]
    fn degree_three_basis_is_orthonormal_on_sphere() {
        // midpoint rule on a lat-long grid
        let n = 200;
        let mut gram = [[0.0f64; 16]; 16];
        for a in 0..n {
            let th = std::f64::consts::PI * (a as f64 + 0.5) / n as f64;
            for b in 0..2 * n {
                let ph = std::f64::consts::PI * (b as f64 + 0.5) / n as f64;
                let dir = Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
                let y = basis(3, &dir).unwrap();
                let w = th.sin() * (std::f64::consts::PI / n as f64).powi(2);
                for i in 0..16 {
                    for j in 0..16 {
                        gram[i][j] += y[i] * y[j] * w;
                    }
                }
            }
        }
        for i in 0..16 {
            for j in 0..16 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i][j] - want).abs() < 1e-3, "{} {} {}", i, j, gram[i][j]);
            }
        }
    }

    proptest! {
        #[test]
        fn band_one_is_odd(c in prop::array::uniform3(prop::array::uniform3(-1.0f64..1.0)), d in prop::array::uniform3(-1.0f64..1.0)) {
            let dir = Vec3::from(d);
            prop_assume!(dir.norm() > 1e-3);
            let dir = dir.normalize();
            let sh = vec![[0.0; 3], c[0], c[1], c[2]];
            let a = sh_eval_unclamped(&sh, &dir).unwrap();
            let b = sh_eval_unclamped(&sh, &(-dir)).unwrap();
            for ch in 0..3 {
                prop_assert!(((a[ch] - 0.5) + (b[ch] - 0.5)).abs() < 1e-12);
            }
        }

    }
}
