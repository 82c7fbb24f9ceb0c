//! Image metrics and the photometric training loss.
//!
//! Masked pixels are excluded from every average. For SSIM both images are
//! zeroed on masked pixels before filtering, and the windowed statistics use
//! zero padding at the border.

use crate::error::{Error, Result};
use crate::math::Rgb;
use crate::raster::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn joint_mask(a: &Image, b: &Image) -> Result<Vec<bool>> {
    a.same_shape(b)?;
    Ok(a.mask.iter().zip(&b.mask).map(|(x, y)| *x && *y).collect())
}

/// Peak signal-to-noise ratio for a unit peak. Identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mask = joint_mask(a, b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..a.len() {
        if mask[i] {
            for c in 0..3 {
                sum += (a.pixels[i][c] - b.pixels[i][c]).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::ShapeMismatch("no valid pixels".into()));
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable, zero-padded filtering of a single-channel plane.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &Image, mask: &[bool], c: usize) -> Vec<f64> {
    img.pixels.iter().zip(mask).map(|(p, m)| if *m { p[c] } else { 0.0 }).collect()
}

/// Mean SSIM over valid pixels and channels, and optionally its gradient
/// with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<Rgb>>)> {
    let mask = joint_mask(a, b)?;
    let (w, h) = (a.width, a.height);
    let valid = mask.iter().filter(|m| **m).count();
    if valid == 0 {
        return Err(Error::ShapeMismatch("no valid pixels".into()));
    }
    let norm = 1.0 / (3 * valid) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; w * h]);
    for c in 0..3 {
        let x = channel(a, &mask, c);
        let y = channel(b, &mask, c);
        let sq = |v: &[f64]| v.iter().map(|t| t * t).collect::<Vec<_>>();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h), blur(&y, w, h));
        let (exx, eyy, exy) = (blur(&sq(&x), w, h), blur(&sq(&y), w, h), blur(&xy, w, h));
        let mut d_mu = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for i in 0..w * h {
            if !mask[i] {
                continue;
            }
            let a1 = 2.0 * mx[i] * my[i] + C1;
            let a2 = 2.0 * (exy[i] - mx[i] * my[i]) + C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + C1;
            let b2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + C2;
            let r = a1 / b1;
            let s = r * (a2 / b2);
            total += s;
            if want_grad {
                // grouped so that every term cancels exactly when a == b
                d_mu[i] = norm * 2.0 * (my[i] * (a2 - a1) - mx[i] * s * (b2 - b1)) / (b1 * b2);
                d_exx[i] = -(norm * (s / b2));
                d_exy[i] = 2.0 * (norm * (r / b2));
            }
        }
        if let Some(g) = grad.as_mut() {
            // the window is symmetric, so the adjoint of blurring is blurring
            let (bm, bxx, bxy) = (blur(&d_mu, w, h), blur(&d_exx, w, h), blur(&d_exy, w, h));
            for i in 0..w * h {
                if mask[i] {
                    g[i][c] = bm[i] + 2.0 * x[i] * bxx[i] + y[i] * bxy[i];
                }
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and `dSSIM/da`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<Rgb>)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

/// `(1 - w) * L1 + w * (1 - SSIM)` over valid pixels, with `dL/drendered`.
pub fn photometric_loss(rendered: &Image, target: &Image, ssim_weight: f64) -> Result<(f64, Vec<Rgb>)> {
    let mask = joint_mask(rendered, target)?;
    let valid = mask.iter().filter(|m| **m).count();
    if valid == 0 {
        return Err(Error::ShapeMismatch("no valid pixels".into()));
    }
    let n = (3 * valid) as f64;
    let mut l1 = 0.0;
    let mut grad = vec![[0.0; 3]; rendered.len()];
    for i in 0..rendered.len() {
        if !mask[i] {
            continue;
        }
        for c in 0..3 {
            let d = rendered.pixels[i][c] - target.pixels[i][c];
            l1 += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[i][c] = (1.0 - ssim_weight) * sign / n;
        }
    }
    let mut loss = (1.0 - ssim_weight) * l1 / n;
    if ssim_weight > 0.0 {
        let (s, g) = ssim_with_grad(rendered, target)?;
        loss += ssim_weight * (1.0 - s);
        for i in 0..grad.len() {
            for c in 0..3 {
                grad[i][c] -= ssim_weight * g[i][c];
            }
        }
    }
    Ok((loss.max(0.0), grad))
}
