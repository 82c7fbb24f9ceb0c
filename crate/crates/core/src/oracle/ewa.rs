//! Monte Carlo estimate of the local-affine splatting error.
//!
//! Ray space maps a camera-space point `t` to `(t0/t2, t1/t2, |t|)`.
//! Linearizing the map at the Gaussian's mean gives a ray-space Gaussian
//! whose marginal over the ray coordinate is the splatted 2D footprint. The
//! error compares that footprint with the exact one, obtained by integrating
//! the pushforward density along each ray.

use std::f64::consts::PI;

use nalgebra::{Cholesky, Matrix2, Matrix3, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::oracle::quadrature::{integrate_gk, QuadratureSpec};

/// Camera-space Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewSpaceGaussian {
    pub mean: Vec3,
    pub cov: Mat3,
    pub opacity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EwaEstimate {
    pub error: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl EwaEstimate {
    /// Normal 95% confidence interval.
    pub fn ci95(&self) -> (f64, f64) {
        (self.error - 1.96 * self.std_error, self.error + 1.96 * self.std_error)
    }
}

pub fn to_ray_space(t: &Vec3) -> Vec3 {
    Vec3::new(t.x / t.z, t.y / t.z, t.norm())
}

pub fn from_ray_space(x: &Vec3) -> Vec3 {
    let l = (x.x * x.x + x.y * x.y + 1.0).sqrt();
    Vec3::new(x.x, x.y, 1.0) * (x.z / l)
}

pub fn ray_space_jacobian(t: &Vec3) -> Mat3 {
    let n = t.norm();
    let z2 = t.z * t.z;
    Matrix3::new(1.0 / t.z, 0.0, -t.x / z2, 0.0, 1.0 / t.z, -t.y / z2, t.x / n, t.y / n, t.z / n)
}

/// `|det d t / d x|` of the inverse map.
pub fn inverse_volume_factor(x: &Vec3) -> f64 {
    let l = (x.x * x.x + x.y * x.y + 1.0).sqrt();
    x.z * x.z / (l * l * l)
}

struct Normal3 {
    mean: Vec3,
    chol: Mat3,
    precision: Mat3,
    norm: f64,
}

impl Normal3 {
    fn new(mean: Vec3, cov: Mat3) -> Result<Self> {
        let c = Cholesky::new(cov).ok_or(Error::NotSpd)?;
        let l = c.l();
        let det = l.diagonal().product().powi(2);
        Ok(Self { mean, chol: l, precision: c.inverse(), norm: 1.0 / ((2.0 * PI).powi(3) * det).sqrt() })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        let z = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        self.mean + self.chol * z
    }

    /// Image-plane density of the pushforward: `(1/l^3) * int_0^inf r^2 N(r u) dr`.
    fn footprint(&self, xy: &Vector2<f64>) -> Result<f64> {
        let raw = Vec3::new(xy.x, xy.y, 1.0);
        let l = raw.norm();
        let u = raw / l;
        let a = u.dot(&(self.precision * u));
        let b = u.dot(&(self.precision * self.mean));
        let peak = b / a;
        let off = self.mean - u * peak;
        let kappa = off.dot(&(self.precision * off));
        let width = 12.0 / a.sqrt();
        let lo = (peak - width).max(0.0);
        let hi = (peak + width).max(lo);
        let spec = QuadratureSpec { abs_tol: 1e-300, rel_tol: 1e-10, ..Default::default() };
        let radial = integrate_gk(|r| r * r * (-0.5 * a * (r - peak).powi(2)).exp(), lo, hi, &spec)?;
        Ok(self.norm * (-0.5 * kappa).exp() * radial / (l * l * l))
    }
}

struct Normal2 {
    mean: Vector2<f64>,
    chol: Matrix2<f64>,
    precision: Matrix2<f64>,
    norm: f64,
}

impl Normal2 {
    fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        let c = Cholesky::new(cov).ok_or(Error::NotSpd)?;
        let l = c.l();
        let det = l.diagonal().product().powi(2);
        Ok(Self { mean, chol: l, precision: c.inverse(), norm: 1.0 / (2.0 * PI * det.sqrt()) })
    }

    fn pdf(&self, x: &Vector2<f64>) -> f64 {
        let d = x - self.mean;
        self.norm * (-0.5 * d.dot(&(self.precision * d))).exp()
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vector2<f64> {
        self.mean + self.chol * Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    }
}

/// Estimates the opacity-weighted L1 distance between the exact image-plane
/// footprint and its local-affine Gaussian from `samples` draws of a 50/50
/// mixture of the two.
pub fn ewa_error<R: Rng>(g: &ViewSpaceGaussian, samples: usize, rng: &mut R) -> Result<EwaEstimate> {
    if g.mean.z <= 0.0 {
        return Err(Error::BehindImagePlane);
    }
    if g.opacity == 0.0 || samples == 0 {
        return Ok(EwaEstimate { error: 0.0, std_error: 0.0, samples });
    }
    let exact = Normal3::new(g.mean, g.cov)?;
    let j = ray_space_jacobian(&g.mean);
    let cov_k = j * g.cov * j.transpose();
    let xk = to_ray_space(&g.mean);
    let affine = Normal2::new(Vector2::new(xk.x, xk.y), cov_k.fixed_view::<2, 2>(0, 0).into_owned())?;
    let (mut sum, mut sq) = (0.0, 0.0);
    for i in 0..samples {
        let xy = if i % 2 == 0 {
            let t = exact.sample(rng);
            if t.z <= 0.0 {
                // mass with no image-plane footprint: the affine density is absent there
                sum += 2.0;
                sq += 4.0;
                continue;
            }
            Vector2::new(t.x / t.z, t.y / t.z)
        } else {
            affine.sample(rng)
        };
        let (p, q) = (exact.footprint(&xy)?, affine.pdf(&xy));
        let value = if p + q > 0.0 { (p - q).abs() / (0.5 * (p + q)) } else { 0.0 };
        sum += value;
        sq += value * value;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(EwaEstimate { error: g.opacity * mean, std_error: g.opacity * (var / n).sqrt(), samples })
}

/// Places a Gaussian at `distance` along a direction `angle` radians off
/// the optical axis in the x-z plane, keeping its covariance.
pub fn off_axis(distance: f64, angle: f64, cov: Mat3, opacity: f64) -> ViewSpaceGaussian {
    ViewSpaceGaussian { mean: Vec3::new(angle.sin(), 0.0, angle.cos()) * distance, cov, opacity }
}
