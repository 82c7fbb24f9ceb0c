//! Camera models and ray generation.
//!
//! Camera space is x right, y down, z forward. A BEAP image samples rays
//! uniformly in the two plane angles `theta = atan(x/z)` (about the y axis)
//! and `phi = atan(y/z)` (about the x axis). `theta` is tracked with the
//! hemisphere of `z`, so horizontal fields of view beyond 180 degrees work;
//! `phi` stays in `(-90, 90)` degrees.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Ray, Rgb, Vec3};
use crate::raster::Image;

/// Largest supported field of view on the wrapping axis.
pub const MAX_FOV: f64 = 350.0 * std::f64::consts::PI / 180.0;

/// World-to-camera rigid transform `x_c = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let z = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::InvalidCamera("eye equals target".into()))?;
        let x = (-up)
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to the view direction".into()))?;
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self { rotation, translation: -(rotation * eye) })
    }

    /// Optical center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn dir_to_world(&self, d: &Vec3) -> Vec3 {
        self.rotation.transpose() * d
    }

    fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if !r.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite pose".into()));
        }
        if (r.transpose() * r - Mat3::identity()).norm() > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::InvalidCamera("R is not a rotation".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CameraModel {
    Pinhole(Intrinsics),
    /// Kannala–Brandt fisheye with odd polynomial distortion `k1..k4`.
    KbFisheye(Intrinsics, [f64; 4]),
    /// Field of view in radians per axis.
    Beap {
        fov_x: f64,
        fov_y: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub pose: Pose,
    pub model: CameraModel,
    pub width: usize,
    pub height: usize,
}

/// Camera-only BEAP images share the generic raster type.
pub type BeapImage = Image;

impl Camera {
    pub fn new(pose: Pose, model: CameraModel, width: usize, height: usize) -> Result<Self> {
        let cam = Self { pose, model, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn beap(pose: Pose, fov_x_deg: f64, fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            pose,
            CameraModel::Beap { fov_x: fov_x_deg.to_radians(), fov_y: fov_y_deg.to_radians() },
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("resolution must be positive".into()));
        }
        match self.model {
            CameraModel::Pinhole(i) | CameraModel::KbFisheye(i, _) => {
                if !(i.fx > 0.0 && i.fy > 0.0) || !i.cx.is_finite() || !i.cy.is_finite() {
                    return Err(Error::InvalidCamera("focal lengths must be positive".into()));
                }
            }
            CameraModel::Beap { fov_x, fov_y } => {
                if !(fov_x > 0.0 && fov_x <= MAX_FOV + 1e-12) {
                    return Err(Error::InvalidCamera(format!("fov_x {:.3} deg outside (0, 350]", fov_x.to_degrees())));
                }
                if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
                    return Err(Error::InvalidCamera(format!("fov_y {:.3} deg outside (0, 180)", fov_y.to_degrees())));
                }
            }
        }
        Ok(())
    }

    pub fn is_beap(&self) -> bool {
        matches!(self.model, CameraModel::Beap { .. })
    }

    /// Camera-space direction through a continuous image position
    /// (pixel `x` spans `[x, x + 1)`).
    pub fn direction_at(&self, xp: f64, yp: f64) -> Result<Vec3> {
        match self.model {
            CameraModel::Pinhole(i) => Ok(unproject_pinhole(xp, yp, &i)),
            CameraModel::KbFisheye(i, k) => unproject_kb(xp, yp, &i, &k),
            CameraModel::Beap { fov_x, fov_y } => {
                let theta = (xp - self.width as f64 / 2.0) * fov_x / self.width as f64;
                let phi = (yp - self.height as f64 / 2.0) * fov_y / self.height as f64;
                Ok(angles_to_dir(theta, phi))
            }
        }
    }

    /// Continuous image position of a camera-space direction, if the model can image it.
    pub fn project(&self, d: &Vec3) -> Option<(f64, f64)> {
        match self.model {
            CameraModel::Pinhole(i) => project_pinhole(d, &i).ok(),
            CameraModel::KbFisheye(i, k) => project_kb(d, &i, &k),
            CameraModel::Beap { fov_x, fov_y } => {
                let (theta, phi) = dir_to_angles(d);
                Some((
                    theta * self.width as f64 / fov_x + self.width as f64 / 2.0,
                    phi * self.height as f64 / fov_y + self.height as f64 / 2.0,
                ))
            }
        }
    }

    pub fn pixel_direction(&self, x: usize, y: usize) -> Result<Vec3> {
        if x >= self.width || y >= self.height {
            return Err(Error::PixelOutOfRange { x, y, w: self.width, h: self.height });
        }
        self.direction_at(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// World ray through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Result<Ray> {
        let d = self.pixel_direction(x, y)?;
        Ray::new(self.pose.center(), self.pose.dir_to_world(&d))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn load_json(path: &Path) -> Result<Camera> {
        let text = std::fs::read_to_string(path)?;
        let json: CameraJson =
            serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
        json.to_camera()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&CameraJson::from_camera(self))?)?;
        Ok(())
    }
}

/// Plane angles `(theta, phi)` at the center of BEAP pixel `(x, y)`.
pub fn beap_angles(x: usize, y: usize, camera: &Camera) -> Result<(f64, f64)> {
    let CameraModel::Beap { fov_x, fov_y } = camera.model else {
        return Err(Error::InvalidCamera("not a BEAP camera".into()));
    };
    if x >= camera.width || y >= camera.height {
        return Err(Error::PixelOutOfRange { x, y, w: camera.width, h: camera.height });
    }
    let (w, h) = (camera.width as f64, camera.height as f64);
    Ok(((x as f64 + 0.5 - w / 2.0) * fov_x / w, (y as f64 + 0.5 - h / 2.0) * fov_y / h))
}

/// Forward floor mapping from angles to the BEAP pixel containing them.
pub fn beap_pixel(theta: f64, phi: f64, camera: &Camera) -> Option<(usize, usize)> {
    let CameraModel::Beap { fov_x, fov_y } = camera.model else {
        return None;
    };
    let (w, h) = (camera.width as f64, camera.height as f64);
    let x = (theta * w / fov_x + w / 2.0).floor();
    let y = (phi * h / fov_y + h / 2.0).floor();
    if x < 0.0 || y < 0.0 || x >= w || y >= h {
        return None;
    }
    Some((x as usize, y as usize))
}

/// Unit direction with `atan2(x, z) = theta` and `atan(y / z) = phi`.
pub fn angles_to_dir(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, ct * sp, ct * cp).normalize()
}

/// Inverse of [`angles_to_dir`]; `theta` in `(-pi, pi]`, `phi` in `[-pi/2, pi/2]`.
pub fn dir_to_angles(d: &Vec3) -> (f64, f64) {
    let theta = d.x.atan2(d.z);
    let phi = if d.y == 0.0 { 0.0 } else { (d.y / d.z).atan() };
    (theta, phi)
}

pub fn project_pinhole(d: &Vec3, k: &Intrinsics) -> Result<(f64, f64)> {
    if !(d.z > 0.0) {
        return Err(Error::BehindImagePlane);
    }
    Ok((k.fx * d.x / d.z + k.cx, k.fy * d.y / d.z + k.cy))
}

pub fn unproject_pinhole(xp: f64, yp: f64, k: &Intrinsics) -> Vec3 {
    Vec3::new((xp - k.cx) / k.fx, (yp - k.cy) / k.fy, 1.0).normalize()
}

fn kb_poly(psi: f64, k: &[f64; 4]) -> f64 {
    let p2 = psi * psi;
    psi * (1.0 + p2 * (k[0] + p2 * (k[1] + p2 * (k[2] + p2 * k[3]))))
}

/// Kannala–Brandt projection. `None` beyond the range where the distortion
/// polynomial is increasing.
pub fn project_kb(d: &Vec3, intr: &Intrinsics, k: &[f64; 4]) -> Option<(f64, f64)> {
    let rho = d.x.hypot(d.y);
    let psi = rho.atan2(d.z);
    if psi > kb_max_incidence(k) {
        return None;
    }
    // psi_d / rho, with the small-angle series when the ray is on axis
    let ratio = if rho <= 1e-8 * d.z.abs() {
        let r2 = (rho / d.z).powi(2);
        (1.0 / d.z) * (1.0 - r2 / 3.0) * (1.0 + k[0] * psi * psi)
    } else {
        kb_poly(psi, k) / rho
    };
    Some((intr.fx * ratio * d.x + intr.cx, intr.fy * ratio * d.y + intr.cy))
}

/// Largest incidence angle (capped at pi) up to which the distortion is monotone.
pub fn kb_max_incidence(k: &[f64; 4]) -> f64 {
    let deriv = |p: f64| {
        let p2 = p * p;
        1.0 + p2 * (3.0 * k[0] + p2 * (5.0 * k[1] + p2 * (7.0 * k[2] + p2 * 9.0 * k[3])))
    };
    let steps = 64;
    for i in 1..=steps {
        let p = std::f64::consts::PI * i as f64 / steps as f64;
        if deriv(p) <= 0.0 {
            // last angle where the mapping is still increasing
            let (mut lo, mut hi) = (std::f64::consts::PI * (i - 1) as f64 / steps as f64, p);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if deriv(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return lo;
        }
    }
    std::f64::consts::PI
}

pub fn unproject_kb(xp: f64, yp: f64, intr: &Intrinsics, k: &[f64; 4]) -> Result<Vec3> {
    let mx = (xp - intr.cx) / intr.fx;
    let my = (yp - intr.cy) / intr.fy;
    let target = mx.hypot(my);
    if target == 0.0 {
        return Ok(Vec3::z());
    }
    let limit = kb_max_incidence(k);
    let mut psi = target.min(limit);
    for _ in 0..50 {
        let p2 = psi * psi;
        let f = kb_poly(psi, k) - target;
        let df = 1.0 + p2 * (3.0 * k[0] + p2 * (5.0 * k[1] + p2 * (7.0 * k[2] + p2 * 9.0 * k[3])));
        let step = f / df;
        psi = (psi - step).clamp(0.0, limit);
        if step.abs() < 1e-15 {
            break;
        }
    }
    if (kb_poly(psi, k) - target).abs() > 1e-9 * target.max(1.0) {
        return Err(Error::InvalidCamera("pixel lies outside the fisheye image circle".into()));
    }
    let s = psi.sin();
    Ok(Vec3::new(s * mx / target, s * my / target, psi.cos()))
}

/// Resamples `source` (seen by `src`) into the pixel grid of `dst` by
/// bilinear interpolation. Pixels whose ray leaves the source image, or
/// touches masked source pixels, are masked.
pub fn resample(source: &Image, src: &Camera, dst: &Camera) -> Result<Image> {
    if source.width != src.width || source.height != src.height {
        return Err(Error::ShapeMismatch("source image does not match its camera".into()));
    }
    let to_src = src.pose.rotation * dst.pose.rotation.transpose();
    let w = dst.width;
    let samples: Vec<Option<Rgb>> = (0..dst.pixel_count())
        .into_par_iter()
        .map(|i| {
            let d = dst.pixel_direction(i % w, i / w).ok()?;
            let (xp, yp) = src.project(&(to_src * d))?;
            bilinear(source, xp, yp)
        })
        .collect();
    let mut out = Image::new(dst.width, dst.height, [0.0; 3]);
    for (i, s) in samples.into_iter().enumerate() {
        match s {
            Some(c) => out.pixels[i] = c,
            None => out.mask[i] = false,
        }
    }
    Ok(out)
}

/// Resamples a source photograph into the BEAP grid of `target`.
pub fn resample_to_beap(source: &Image, src: &Camera, target: &Camera) -> Result<BeapImage> {
    if !target.is_beap() {
        return Err(Error::InvalidCamera("target is not a BEAP camera".into()));
    }
    resample(source, src, target)
}

fn bilinear(img: &Image, xp: f64, yp: f64) -> Option<Rgb> {
    let (w, h) = (img.width as f64, img.height as f64);
    if !(xp >= 0.0 && yp >= 0.0 && xp <= w && yp <= h) {
        return None;
    }
    let u = (xp - 0.5).clamp(0.0, w - 1.0);
    let v = (yp - 0.5).clamp(0.0, h - 1.0);
    let x0 = (u.floor() as usize).min(img.width - 1);
    let y0 = (v.floor() as usize).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let taps =
        [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x1, y0, fx * (1.0 - fy)), (x0, y1, (1.0 - fx) * fy), (x1, y1, fx * fy)];
    let mut c = [0.0; 3];
    for (x, y, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        let i = y * img.width + x;
        if !img.mask[i] {
            return None;
        }
        for ch in 0..3 {
            c[ch] += wt * img.pixels[i][ch];
        }
    }
    Some(c)
}

/// Solid angle subtended by every pixel, from its four corner rays.
pub fn pixel_solid_angles(camera: &Camera) -> Result<Vec<f64>> {
    let w = camera.width;
    let corners: Vec<Vec3> = (0..(w + 1) * (camera.height + 1))
        .map(|i| camera.direction_at((i % (w + 1)) as f64, (i / (w + 1)) as f64))
        .collect::<Result<_>>()?;
    let at = |x: usize, y: usize| corners[y * (w + 1) + x];
    let tri =
        |a: Vec3, b: Vec3, c: Vec3| 2.0 * a.dot(&b.cross(&c)).abs().atan2(1.0 + a.dot(&b) + b.dot(&c) + c.dot(&a));
    Ok((0..camera.pixel_count())
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let (a, b, c, d) = (at(x, y), at(x + 1, y), at(x + 1, y + 1), at(x, y + 1));
            tri(a, b, c) + tri(a, c, d)
        })
        .collect())
}

/// Coefficient of variation (std / mean) of the per-pixel solid angle.
/// Zero means every pixel covers the same patch of the sphere.
pub fn solid_angle_dispersion(camera: &Camera) -> Result<f64> {
    let omega = pixel_solid_angles(camera)?;
    let n = omega.len() as f64;
    let mean = omega.iter().sum::<f64>() / n;
    let var = omega.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// BEAP camera with the same pose and resolution whose field of view spans
/// the horizontal and vertical extent of `camera`.
pub fn covering_beap(camera: &Camera) -> Result<Camera> {
    if camera.is_beap() {
        return Ok(*camera);
    }
    let (w, h) = (camera.width as f64, camera.height as f64);
    let edge = |x: f64, y: f64| camera.direction_at(x, y).map(|d| dir_to_angles(&d));
    let theta = edge(0.0, 0.5 * h)?.0.abs().max(edge(w, 0.5 * h)?.0.abs());
    let phi = edge(0.5 * w, 0.0)?.1.abs().max(edge(0.5 * w, h)?.1.abs());
    let fov = |a: f64| (2.0 * a.to_degrees()).min(349.0);
    Camera::beap(camera.pose, fov(theta), fov(phi), camera.width, camera.height)
}

/// Pixels whose ray lies in the central angular window
/// `|theta| <= w / 2fx`, `|phi| <= h / 2fy`; the rest are peripheral.
pub fn central_region_mask(camera: &Camera, fx: f64, fy: f64) -> Result<Vec<bool>> {
    if !(fx > 0.0 && fy > 0.0) {
        return Err(Error::InvalidCamera("central region needs positive fx and fy".into()));
    }
    let half_theta = camera.width as f64 / (2.0 * fx);
    let half_phi = camera.height as f64 / (2.0 * fy);
    Ok((0..camera.pixel_count())
        .map(|i| match camera.pixel_direction(i % camera.width, i / camera.width) {
            Ok(d) => {
                let (theta, phi) = dir_to_angles(&d);
                theta.abs() <= half_theta && phi.abs() <= half_phi
            }
            // outside a fisheye image circle
            Err(_) => false,
        })
        .collect())
}

/// On-disk camera description.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    /// Image file this camera belongs to, for multi-view camera lists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub model: String,
    pub w: usize,
    pub h: usize,
    #[serde(default)]
    pub fx: f64,
    #[serde(default)]
    pub fy: f64,
    #[serde(default)]
    pub cx: f64,
    #[serde(default)]
    pub cy: f64,
    #[serde(default)]
    pub k: [f64; 4],
    #[serde(default)]
    pub fovx_deg: f64,
    #[serde(default)]
    pub fovy_deg: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraJson {
    pub fn to_camera(&self) -> Result<Camera> {
        let intr = Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy };
        let model = match self.model.as_str() {
            "pinhole" => CameraModel::Pinhole(intr),
            "kb" => CameraModel::KbFisheye(intr, self.k),
            "beap" => CameraModel::Beap { fov_x: self.fovx_deg.to_radians(), fov_y: self.fovy_deg.to_radians() },
            other => return Err(Error::InvalidCamera(format!("unknown model '{other}'"))),
        };
        let pose = Pose { rotation: Mat3::from_row_slice(&self.r), translation: Vec3::from(self.t) };
        Camera::new(pose, model, self.w, self.h)
    }

    pub fn from_camera(cam: &Camera) -> Self {
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = cam.pose.rotation[(row, col)];
            }
        }
        let mut json = CameraJson {
            model: String::new(),
            w: cam.width,
            h: cam.height,
            r,
            t: [cam.pose.translation.x, cam.pose.translation.y, cam.pose.translation.z],
            ..Default::default()
        };
        match cam.model {
            CameraModel::Pinhole(i) | CameraModel::KbFisheye(i, _) => {
                json.model = if matches!(cam.model, CameraModel::Pinhole(_)) { "pinhole" } else { "kb" }.into();
                (json.fx, json.fy, json.cx, json.cy) = (i.fx, i.fy, i.cx, i.cy);
                if let CameraModel::KbFisheye(_, k) = cam.model {
                    json.k = k;
                }
            }
            CameraModel::Beap { fov_x, fov_y } => {
                json.model = "beap".into();
                json.fovx_deg = fov_x.to_degrees();
                json.fovy_deg = fov_y.to_degrees();
            }
        }
        json
    }
}

/// Reads a camera file holding either one camera object or a list of them.
pub fn load_camera_list(path: &Path) -> Result<Vec<CameraJson>> {
    let text = std::fs::read_to_string(path)?;
    let parse_err = |e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        msg: format!("line {} column {}: {}", e.line(), e.column(), e),
    };
    // parse the text directly so errors keep their line numbers
    if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(parse_err)
    } else {
        Ok(vec![serde_json::from_str(&text).map_err(parse_err)?])
    }
}
