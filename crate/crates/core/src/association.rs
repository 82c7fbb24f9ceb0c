//! Ray–particle association.
//!
//! Every Gaussian gets a bounding frustum: two half-planes through the
//! camera's y axis (horizontal angle `theta`) and two planes through its x
//! axis (vertical angle `phi`), each tangent to the Gaussian's
//! `lambda`-sigma ellipsoid. Both pairs come from a closed-form quadratic in
//! the plane tangent. The frustum is intersected with the angular tiles of
//! the image and the resulting (tile, depth) keyed entries are radix sorted.

use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;

use crate::camera::{dir_to_angles, Camera, CameraModel, Pose};
use crate::error::{Error, Result};
use crate::math::{self, Gaussian3D, Mat3, Vec3};

/// Gaussians closer than this to the optical center are dropped.
pub const NEAR_LIMIT: f64 = 0.01;
/// Gaussians enclosing the optical center are dropped below this opacity.
pub const INSIDE_MIN_OPACITY: f64 = 0.05;
/// Angular slack added to every bound against round-off at tile edges.
const SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewGaussian {
    pub mean: Vec3,
    pub cov: Mat3,
    /// Euclidean distance to the optical center.
    pub depth: f64,
}

pub fn to_view(g: &Gaussian3D, pose: &Pose) -> Result<ViewGaussian> {
    let mean = pose.to_camera(&g.mean);
    let cov = pose.rotation * g.covariance()? * pose.rotation.transpose();
    let cov = 0.5 * (cov + cov.transpose());
    Ok(ViewGaussian { mean, cov, depth: mean.norm() })
}

/// Raw tangents of the four bounding planes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PbfBounds {
    pub tan_theta: [f64; 2],
    pub tan_phi: [f64; 2],
    /// Bounds are usable (not clamped, not NaN).
    pub valid: bool,
    /// No tangent planes exist on some axis; the frustum is the whole field of view.
    pub clamped: bool,
}

impl PbfBounds {
    pub fn clamped() -> Self {
        Self {
            tan_theta: [f64::NEG_INFINITY, f64::INFINITY],
            tan_phi: [f64::NEG_INFINITY, f64::INFINITY],
            valid: false,
            clamped: true,
        }
    }
}

/// Roots of `a c^2 - 2 b c + e = 0` in ascending order, or `None` when the
/// discriminant is negative. A vanishing `a` yields an infinite root.
fn tangent_roots(a: f64, b: f64, e: f64) -> Option<[f64; 2]> {
    let disc = b * b - a * e;
    if disc < 0.0 || disc.is_nan() {
        return None;
    }
    let q = b + disc.sqrt().copysign(b);
    let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, e / q) };
    Some(if r1 <= r2 { [r1, r2] } else { [r2, r1] })
}

/// Solves for the tangents of the planes tangent to the `lambda` ellipsoid.
pub fn solve_pbf(vg: &ViewGaussian, lambda: f64) -> Result<PbfBounds> {
    if (vg.cov - vg.cov.transpose()).norm() > 1e-9 * vg.cov.norm() || vg.cov.cholesky().is_none() {
        return Err(Error::NotSpd);
    }
    let l2 = lambda * lambda;
    let m = vg.mean;
    let t = |i: usize, j: usize| l2 * vg.cov[(i, j)] - m[i] * m[j];
    let (t00, t02, t11, t12, t22) = (t(0, 0), t(0, 2), t(1, 1), t(1, 2), t(2, 2));
    match (tangent_roots(t22, t02, t00), tangent_roots(t22, t12, t11)) {
        (Some(tan_theta), Some(tan_phi)) => {
            let valid = tan_theta.iter().chain(&tan_phi).all(|v| !v.is_nan());
            Ok(PbfBounds { tan_theta, tan_phi, valid, clamped: !valid })
        }
        _ => Ok(PbfBounds::clamped()),
    }
}

/// Relative tangency residual `((n.mu)^2 - lambda^2 n^T Sigma n) / (|n|^2 |mu|^2)`
/// of the plane through the optical center with normal `n`.
pub fn plane_residual(n: &Vec3, vg: &ViewGaussian, lambda: f64) -> f64 {
    let scale = (n.norm_squared() * vg.mean.norm_squared()).max(1e-300);
    ((n.dot(&vg.mean)).powi(2) - lambda * lambda * n.dot(&(vg.cov * n))) / scale
}

/// Plane normals for the four tangents of a bounding frustum.
pub fn pbf_normals(pbf: &PbfBounds) -> [Vec3; 4] {
    let normal = |c: f64, axis: Vec3| if c.is_finite() { axis - Vec3::z() * c } else { Vec3::z() };
    [
        normal(pbf.tan_theta[0], Vec3::x()),
        normal(pbf.tan_theta[1], Vec3::x()),
        normal(pbf.tan_phi[0], Vec3::y()),
        normal(pbf.tan_phi[1], Vec3::y()),
    ]
}

/// Mirror-shifted tangent `sin(theta) / (cos(theta) + 1)`, i.e. `tan(theta / 2)`,
/// strictly increasing over `(-pi, pi)`.
pub fn mirror_tan(theta: f64) -> f64 {
    let den = theta.cos() + 1.0;
    if den <= 0.0 || theta.abs() >= PI {
        return f64::INFINITY.copysign(theta);
    }
    theta.sin() / den
}

/// Closed angular interval `[lo, hi]`. On a periodic axis `hi` may exceed the
/// principal range; the interval then wraps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn full() -> Self {
        Self { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn is_full(&self) -> bool {
        self.lo == f64::NEG_INFINITY
    }

    pub fn contains(&self, a: f64, period: f64) -> bool {
        self.is_full()
            || (-1..=1).any(|k| {
                let s = a + k as f64 * period;
                self.lo <= s && s <= self.hi
            })
    }

    /// Overlap test on an axis with the given period.
    pub fn overlaps(&self, other: &Interval, period: f64) -> bool {
        if self.is_full() || other.is_full() {
            return true;
        }
        (-1..=1).any(|k| {
            let shift = k as f64 * period;
            self.lo + shift <= other.hi && other.lo <= self.hi + shift
        })
    }

    /// The interval as mirror tangents; `lo > hi` means it wraps through infinity.
    pub fn mirror(&self) -> (f64, f64) {
        let wrap = |a: f64| (a + PI).rem_euclid(2.0 * PI) - PI;
        (mirror_tan(wrap(self.lo)), mirror_tan(wrap(self.hi)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngularBounds {
    pub theta: Interval,
    pub phi: Interval,
}

impl AngularBounds {
    pub fn full() -> Self {
        Self { theta: Interval::full(), phi: Interval::full() }
    }
}

/// `phi` of a point, the angle of the plane through the x axis that contains it.
fn plane_angle(y: f64, z: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        (y / z).atan()
    }
}

/// Picks, among the candidate bound angles, the nearest one on each side of
/// `center` along an axis of the given period.
fn bracket(center: f64, candidates: &[f64], period: f64) -> Interval {
    let mut up = f64::INFINITY;
    let mut down = f64::INFINITY;
    for &c in candidates {
        let fwd = (c - center).rem_euclid(period);
        let back = (center - c).rem_euclid(period);
        up = up.min(fwd);
        down = down.min(back);
    }
    Interval { lo: center - down - SLACK, hi: center + up + SLACK }
}

/// Turns raw plane tangents into angular intervals around the Gaussian center.
///
/// Each `theta` tangent names a plane through the y axis, which is two
/// half-planes `atan(t)` and `atan(t) + pi`. Of the four candidates the
/// nearest below and above the center's own angle bound the ellipsoid.
/// `phi` planes are whole planes, so their angle is periodic in `pi`.
pub fn effective_bounds(pbf: &PbfBounds, mean: &Vec3) -> AngularBounds {
    if pbf.clamped || !pbf.valid {
        return AngularBounds::full();
    }
    let center_theta = mean.x.atan2(mean.z);
    let [a, b] = pbf.tan_theta.map(f64::atan);
    let theta = bracket(center_theta, &[a, a + PI, b, b + PI], 2.0 * PI);
    let center_phi = plane_angle(mean.y, mean.z);
    let phi = bracket(center_phi, &pbf.tan_phi.map(f64::atan), PI);
    AngularBounds { theta, phi }
}

/// Angular extent of one tile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileBounds {
    pub theta: Interval,
    pub phi: Interval,
}

/// Camera sub-frustum grid: tiles of `tile_size` x `tile_size` pixels with their angular extents.
#[derive(Clone, Debug, PartialEq)]
pub struct CsfGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
    pub tiles: Vec<TileBounds>,
}

impl CsfGrid {
    /// For BEAP cameras the tiles are cut at pixel edges and partition the
    /// field of view exactly. Other models bound the pixel-center rays of
    /// each tile.
    pub fn new(camera: &Camera, tile_size: usize) -> Result<Self> {
        if tile_size == 0 {
            return Err(Error::InvalidConfig("tile size must be positive".into()));
        }
        let tiles_x = camera.width.div_ceil(tile_size);
        let tiles_y = camera.height.div_ceil(tile_size);
        let (w, h) = (camera.width as f64, camera.height as f64);
        let tiles = match camera.model {
            CameraModel::Beap { fov_x, fov_y } => {
                let tx = |x: usize| (x.min(camera.width) as f64 - w / 2.0) * fov_x / w;
                let ty = |y: usize| (y.min(camera.height) as f64 - h / 2.0) * fov_y / h;
                (0..tiles_x * tiles_y)
                    .map(|i| {
                        let (cx, cy) = (i % tiles_x, i / tiles_x);
                        TileBounds {
                            theta: Interval { lo: tx(cx * tile_size), hi: tx((cx + 1) * tile_size) },
                            phi: Interval { lo: ty(cy * tile_size), hi: ty((cy + 1) * tile_size) },
                        }
                    })
                    .collect()
            }
            _ => (0..tiles_x * tiles_y)
                .into_par_iter()
                .map(|i| {
                    let (cx, cy) = (i % tiles_x, i / tiles_x);
                    let mut angles = Vec::new();
                    for y in cy * tile_size..((cy + 1) * tile_size).min(camera.height) {
                        for x in cx * tile_size..((cx + 1) * tile_size).min(camera.width) {
                            if let Ok(d) = camera.pixel_direction(x, y) {
                                angles.push(dir_to_angles(&d));
                            }
                        }
                    }
                    ray_extent(&angles)
                })
                .collect(),
        };
        Ok(Self { tile_size, tiles_x, tiles_y, width: camera.width, height: camera.height, tiles })
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` of a tile.
    pub fn tile_pixels(&self, tile: usize) -> (usize, usize, usize, usize) {
        let (cx, cy) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = cx * self.tile_size;
        let y0 = cy * self.tile_size;
        (x0, (x0 + self.tile_size).min(self.width), y0, (y0 + self.tile_size).min(self.height))
    }

    pub fn tile_of_pixel(&self, x: usize, y: usize) -> usize {
        (y / self.tile_size) * self.tiles_x + x / self.tile_size
    }

    pub fn overlaps(&self, tile: usize, bounds: &AngularBounds) -> bool {
        let t = &self.tiles[tile];
        bounds.theta.overlaps(&t.theta, 2.0 * PI) && bounds.phi.overlaps(&t.phi, PI)
    }
}

/// Smallest intervals containing a set of ray angles, unwrapped around the first ray.
fn ray_extent(angles: &[(f64, f64)]) -> TileBounds {
    let Some(&(t0, p0)) = angles.first() else {
        // a tile without rays overlaps nothing
        let empty = Interval { lo: f64::INFINITY, hi: f64::NEG_INFINITY };
        return TileBounds { theta: empty, phi: empty };
    };
    let wrap = |d: f64, period: f64| (d + period / 2.0).rem_euclid(period) - period / 2.0;
    let (mut tlo, mut thi, mut plo, mut phi) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &(t, p) in angles {
        let dt = wrap(t - t0, 2.0 * PI);
        let dp = wrap(p - p0, PI);
        tlo = tlo.min(dt);
        thi = thi.max(dt);
        plo = plo.min(dp);
        phi = phi.max(dp);
    }
    TileBounds {
        theta: Interval { lo: t0 + tlo - SLACK, hi: t0 + thi + SLACK },
        phi: Interval { lo: p0 + plo - SLACK, hi: p0 + phi + SLACK },
    }
}

/// Whether a Gaussian takes part in rendering from this camera at all.
pub fn keep_for_render(vg: &ViewGaussian, g: &Gaussian3D, camera_center: &Vec3, lambda: f64) -> Result<bool> {
    if vg.depth < NEAR_LIMIT {
        return Ok(false);
    }
    Ok(!(camera_inside(g, camera_center, lambda)? && g.opacity() < INSIDE_MIN_OPACITY))
}

/// Whether `point` lies inside the Gaussian's `lambda` ellipsoid.
pub fn camera_inside(g: &Gaussian3D, point: &Vec3, lambda: f64) -> Result<bool> {
    let frame = math::whitening(g)?;
    Ok((frame.whitening * (point - g.mean)).norm_squared() <= lambda * lambda)
}

/// Composite sort key: tile id in the high word, depth bits in the low word.
pub fn entry_key(tile: u32, depth: f64) -> u64 {
    ((tile as u64) << 32) | (depth as f32).to_bits() as u64
}

/// Stable least-significant-digit radix sort of keys with a payload.
pub fn radix_sort_pairs(keys: &mut Vec<u64>, vals: &mut Vec<u32>) {
    assert_eq!(keys.len(), vals.len());
    let n = keys.len();
    let mut k2 = vec![0u64; n];
    let mut v2 = vec![0u32; n];
    for pass in 0..8 {
        let shift = pass * 8;
        let mut counts = [0usize; 256];
        for k in keys.iter() {
            counts[((k >> shift) & 0xff) as usize] += 1;
        }
        if counts.contains(&n) {
            continue;
        }
        let mut offsets = [0usize; 256];
        let mut acc = 0;
        for b in 0..256 {
            offsets[b] = acc;
            acc += counts[b];
        }
        for i in 0..n {
            let b = ((keys[i] >> shift) & 0xff) as usize;
            k2[offsets[b]] = keys[i];
            v2[offsets[b]] = vals[i];
            offsets[b] += 1;
        }
        std::mem::swap(keys, &mut k2);
        std::mem::swap(vals, &mut v2);
    }
}

/// Per-stage wall times of graph construction, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GraphTimings {
    pub prep: f64,
    pub dup: f64,
    pub sort: f64,
}

/// Sorted (tile, depth) work lists for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGraph {
    pub keys: Vec<u64>,
    pub gaussians: Vec<u32>,
    /// Entry range `[start, end)` per tile.
    pub ranges: Vec<(usize, usize)>,
    /// Bounds of every Gaussian; `None` when culled.
    pub bounds: Vec<Option<AngularBounds>>,
    pub timings: GraphTimings,
}

impl RenderGraph {
    pub fn tile_entries(&self, tile: usize) -> &[u32] {
        let (s, e) = self.ranges[tile];
        &self.gaussians[s..e]
    }

    pub fn mean_per_tile(&self) -> f64 {
        self.gaussians.len() as f64 / self.ranges.len().max(1) as f64
    }
}

pub fn build_render_graph(
    gaussians: &[Gaussian3D],
    camera: &Camera,
    grid: &CsfGrid,
    lambda: f64,
) -> Result<RenderGraph> {
    let center = camera.pose.center();
    let t0 = Instant::now();
    let prepared: Vec<Option<(AngularBounds, f64)>> = gaussians
        .par_iter()
        .map(|g| {
            let vg = to_view(g, &camera.pose)?;
            if !keep_for_render(&vg, g, &center, lambda)? {
                return Ok(None);
            }
            let pbf = match solve_pbf(&vg, lambda) {
                Ok(p) => p,
                Err(Error::NotSpd) => PbfBounds::clamped(),
                Err(e) => return Err(e),
            };
            Ok(Some((effective_bounds(&pbf, &vg.mean), vg.depth)))
        })
        .collect::<Result<_>>()?;
    let t1 = Instant::now();

    let per_gaussian: Vec<Vec<u64>> = prepared
        .par_iter()
        .map(|p| match p {
            Some((b, depth)) => {
                (0..grid.tile_count()).filter(|&t| grid.overlaps(t, b)).map(|t| entry_key(t as u32, *depth)).collect()
            }
            None => Vec::new(),
        })
        .collect();
    let total: usize = per_gaussian.iter().map(Vec::len).sum();
    let mut keys = Vec::with_capacity(total);
    let mut ids = Vec::with_capacity(total);
    for (i, ks) in per_gaussian.iter().enumerate() {
        keys.extend_from_slice(ks);
        ids.extend(std::iter::repeat_n(i as u32, ks.len()));
    }
    let t2 = Instant::now();

    radix_sort_pairs(&mut keys, &mut ids);
    let mut ranges = vec![(0usize, 0usize); grid.tile_count()];
    let mut start = 0;
    while start < keys.len() {
        let tile = (keys[start] >> 32) as usize;
        let mut end = start;
        while end < keys.len() && (keys[end] >> 32) as usize == tile {
            end += 1;
        }
        ranges[tile] = (start, end);
        start = end;
    }
    let t3 = Instant::now();

    let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
    Ok(RenderGraph {
        keys,
        gaussians: ids,
        ranges,
        bounds: prepared.into_iter().map(|p| p.map(|(b, _)| b)).collect(),
        timings: GraphTimings { prep: ms(t0, t1), dup: ms(t1, t2), sort: ms(t2, t3) },
    })
}

/// Angles `(theta, phi)` of a Gaussian center, as used to seed [`effective_bounds`].
pub fn center_angles(mean: &Vec3) -> (f64, f64) {
    (mean.x.atan2(mean.z), plane_angle(mean.y, mean.z))
}
