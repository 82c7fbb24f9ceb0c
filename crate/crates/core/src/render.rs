//! Tile-based forward and backward rendering.
//!
//! Each pixel owns one ray. A Gaussian affects the ray when the forward
//! half-ray passes within `lambda` canonical standard deviations of it, which
//! is exactly the region the association bounds. Contributions are blended
//! front to back in the depth order of the render graph.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{self, build_render_graph, CsfGrid, RenderGraph};
use crate::camera::Camera;
use crate::error::Result;
use crate::gradients::{view_direction, GaussianGrads, GradAccumulator, RayBackwardState};
use crate::math::{self, CanonicalFrame, CanonicalRay, Gaussian3D, Ray, Rgb, MAX_ALPHA};
use crate::raster::Image;
use crate::sh;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Support cutoff in standard deviations.
    pub lambda: f64,
    pub tile_size: usize,
    pub background: Rgb,
    /// Skip Gaussians beyond `lambda` at render time. When off, every
    /// associated Gaussian is blended with its full profile.
    pub cutoff: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { lambda: 3.0, tile_size: 16, background: [0.0; 3], cutoff: true }
    }
}

/// Wall time per pipeline stage in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub prep: f64,
    pub dup: f64,
    pub sort: f64,
    pub render: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub image: Image,
    /// Transmittance left after the last blended Gaussian, per pixel.
    pub remaining: Vec<f64>,
    /// Number of Gaussians blended per pixel.
    pub contributors: Vec<u32>,
    pub times: StageTimes,
}

/// Per-Gaussian quantities shared by every ray of a frame.
#[derive(Clone, Debug)]
struct Shaded {
    frame: CanonicalFrame,
    opacity: f64,
    color: Rgb,
    depth_bits: u32,
}

/// One blended term of a pixel.
#[derive(Clone, Copy, Debug)]
struct Hit {
    gaussian: u32,
    t: f64,
    color: Rgb,
    clamped: bool,
    cr: CanonicalRay,
}

/// Whether the forward half-ray meets the `lambda` ellipsoid.
pub fn ray_interacts(cr: &CanonicalRay, kappa: f64, lambda: f64) -> bool {
    let l2 = lambda * lambda;
    kappa <= l2 && (cr.origin.dot(&cr.direction) < 0.0 || cr.origin.norm_squared() <= l2)
}

fn hit(idx: u32, s: &Shaded, ray: &Ray, opts: &RenderOptions) -> Option<Hit> {
    let cr = math::canonical_ray(&s.frame, ray);
    let dd = cr.direction.norm_squared();
    if !(dd > 0.0) {
        return None;
    }
    let kappa = cr.moment.norm_squared() / dd;
    if opts.cutoff && !ray_interacts(&cr, kappa, opts.lambda) {
        return None;
    }
    let raw = s.opacity * (-0.5 * kappa).exp();
    let clamped = raw > MAX_ALPHA;
    Some(Hit { gaussian: idx, t: if clamped { MAX_ALPHA } else { raw }, color: s.color, clamped, cr })
}

/// A scene prepared for one camera: association done, colors evaluated.
pub struct PreparedFrame<'a> {
    scene: &'a [Gaussian3D],
    camera: Camera,
    opts: RenderOptions,
    grid: CsfGrid,
    graph: RenderGraph,
    shaded: Vec<Option<Shaded>>,
    rays: Vec<Option<Ray>>,
}

fn shade(scene: &[Gaussian3D], camera: &Camera) -> Result<Vec<Option<Shaded>>> {
    let center = camera.pose.center();
    scene
        .par_iter()
        .map(|g| {
            let frame = math::whitening(g)?;
            let color = sh::sh_eval(&g.sh, &view_direction(g, &center))?;
            let depth = association::to_view(g, &camera.pose)?.depth;
            Ok(Some(Shaded { frame, opacity: g.opacity(), color, depth_bits: (depth as f32).to_bits() }))
        })
        .collect()
}

fn pixel_rays(camera: &Camera) -> Vec<Option<Ray>> {
    (0..camera.pixel_count())
        .into_par_iter()
        .map(|i| camera.pixel_ray(i % camera.width, i / camera.width).ok())
        .collect()
}

impl<'a> PreparedFrame<'a> {
    pub fn new(scene: &'a [Gaussian3D], camera: &Camera, opts: &RenderOptions) -> Result<Self> {
        camera.validate()?;
        let grid = CsfGrid::new(camera, opts.tile_size)?;
        let graph = build_render_graph(scene, camera, &grid, opts.lambda)?;
        let mut shaded = shade(scene, camera)?;
        for (s, b) in shaded.iter_mut().zip(&graph.bounds) {
            if b.is_none() {
                *s = None;
            }
        }
        Ok(Self { scene, camera: *camera, opts: *opts, grid, graph, shaded, rays: pixel_rays(camera) })
    }

    pub fn graph(&self) -> &RenderGraph {
        &self.graph
    }

    pub fn grid(&self) -> &CsfGrid {
        &self.grid
    }

    fn tile_hits(&self, ray: &Ray, tile: usize) -> Vec<Hit> {
        self.graph
            .tile_entries(tile)
            .iter()
            .filter_map(|&i| self.shaded[i as usize].as_ref().and_then(|s| hit(i, s, ray, &self.opts)))
            .collect()
    }

    fn for_tiles<T: Send, F>(&self, f: F) -> Vec<T>
    where
        F: Fn(usize, usize, usize) -> T + Sync + Send,
    {
        (0..self.grid.tile_count())
            .into_par_iter()
            .map(|tile| {
                let (x0, x1, y0, y1) = self.grid.tile_pixels(tile);
                (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).map(|(x, y)| f(tile, x, y)).collect::<Vec<T>>()
            })
            .flatten()
            .collect()
    }

    pub fn forward(&self) -> FrameOutput {
        let t0 = Instant::now();
        let bg = self.opts.background;
        let w = self.camera.width;
        let results = self.for_tiles(|tile, x, y| {
            let i = y * w + x;
            match &self.rays[i] {
                Some(ray) => {
                    let hits = self.tile_hits(ray, tile);
                    let blend = math::composite_blend(hits.iter().map(|h| (h.t, h.color)));
                    (i, Some((blend, bg)))
                }
                None => (i, None),
            }
        });
        let mut out = FrameOutput {
            image: Image::new(self.camera.width, self.camera.height, bg),
            remaining: vec![1.0; self.camera.pixel_count()],
            contributors: vec![0; self.camera.pixel_count()],
            times: StageTimes::default(),
        };
        for (i, r) in results {
            match r {
                Some((blend, bg)) => {
                    let mut c = blend.color;
                    for ch in 0..3 {
                        c[ch] += bg[ch] * blend.remaining;
                    }
                    out.image.pixels[i] = c;
                    out.remaining[i] = blend.remaining;
                    out.contributors[i] = blend.used as u32;
                }
                None => out.image.mask[i] = false,
            }
        }
        let g = self.graph.timings;
        let render = t0.elapsed().as_secs_f64() * 1e3;
        out.times =
            StageTimes { prep: g.prep, dup: g.dup, sort: g.sort, render, total: g.prep + g.dup + g.sort + render };
        out
    }

    /// Gradients of a loss with respect to every Gaussian given `dL/dpixel`.
    pub fn backward(&self, dl_dimage: &[Rgb]) -> Result<Vec<GaussianGrads>> {
        self.backward_with(dl_dimage, false)
    }

    pub(crate) fn backward_with(&self, dl_dimage: &[Rgb], flip: bool) -> Result<Vec<GaussianGrads>> {
        let n = self.scene.len();
        assert_eq!(dl_dimage.len(), self.camera.pixel_count());
        let bg = self.opts.background;
        let w = self.camera.width;
        // each tile accumulates privately, then tiles are reduced in order
        let per_tile: Vec<Vec<(u32, GradAccumulator)>> = (0..self.grid.tile_count())
            .into_par_iter()
            .map(|tile| {
                let entries = self.graph.tile_entries(tile);
                let mut local: Vec<GradAccumulator> = vec![GradAccumulator::default(); entries.len()];
                let slot = |g: u32| entries.iter().position(|e| *e == g).expect("entry in tile");
                let (x0, x1, y0, y1) = self.grid.tile_pixels(tile);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = y * w + x;
                        let (Some(ray), up) = (&self.rays[i], dl_dimage[i]) else { continue };
                        if up == [0.0; 3] {
                            continue;
                        }
                        let hits = self.tile_hits(ray, tile);
                        let state = RayBackwardState::new(hits.iter().map(|h| (h.t, h.color)).collect(), bg);
                        let grads = state.backward(&up);
                        for (k, h) in hits.iter().enumerate().take(state.blend().used) {
                            let acc = &mut local[slot(h.gaussian)];
                            if !h.clamped {
                                let opacity = self.shaded[h.gaussian as usize].as_ref().map_or(0.0, |s| s.opacity);
                                acc.add_ray_with(&h.cr, &ray.direction, opacity, grads.dl_dt[k], flip);
                            }
                            acc.add_color(&grads.dl_dc[k]);
                        }
                    }
                }
                entries.iter().copied().zip(local).filter(|(_, a)| *a != GradAccumulator::default()).collect()
            })
            .collect();
        let mut total = vec![GradAccumulator::default(); n];
        for tile in per_tile {
            for (g, acc) in tile {
                total[g as usize].merge(&acc);
            }
        }
        let center = self.camera.pose.center();
        total
            .par_iter()
            .zip(self.scene.par_iter())
            .map(|(acc, g)| {
                if *acc == GradAccumulator::default() {
                    Ok(GaussianGrads::zeros(g.sh.len()))
                } else {
                    acc.finish(g, &center)
                }
            })
            .collect()
    }
}

pub fn render(scene: &[Gaussian3D], camera: &Camera, opts: &RenderOptions) -> Result<FrameOutput> {
    let t0 = Instant::now();
    let mut out = PreparedFrame::new(scene, camera, opts)?.forward();
    out.times.total = t0.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

pub fn render_backward(
    scene: &[Gaussian3D],
    camera: &Camera,
    opts: &RenderOptions,
    dl_dimage: &[Rgb],
) -> Result<Vec<GaussianGrads>> {
    PreparedFrame::new(scene, camera, opts)?.backward(dl_dimage)
}

/// Renders without association: every ray is tested against every kept
/// Gaussian, and hits are ordered by the same depth key.
pub fn render_reference(scene: &[Gaussian3D], camera: &Camera, opts: &RenderOptions) -> Result<FrameOutput> {
    let center = camera.pose.center();
    let mut shaded = shade(scene, camera)?;
    for (s, g) in shaded.iter_mut().zip(scene) {
        let vg = association::to_view(g, &camera.pose)?;
        if !association::keep_for_render(&vg, g, &center, opts.lambda)? {
            *s = None;
        }
    }
    let rays = pixel_rays(camera);
    let bg = opts.background;
    let pixels: Vec<Option<math::Blend>> = rays
        .par_iter()
        .map(|r| {
            let ray = r.as_ref()?;
            let mut hits: Vec<(u32, u32, f64, Rgb)> = shaded
                .iter()
                .enumerate()
                .filter_map(|(i, s)| {
                    let s = s.as_ref()?;
                    hit(i as u32, s, ray, opts).map(|h| (s.depth_bits, i as u32, h.t, h.color))
                })
                .collect();
            hits.sort_by_key(|h| (h.0, h.1));
            Some(math::composite_blend(hits.iter().map(|h| (h.2, h.3))))
        })
        .collect();
    let mut out = FrameOutput {
        image: Image::new(camera.width, camera.height, bg),
        remaining: vec![1.0; camera.pixel_count()],
        contributors: vec![0; camera.pixel_count()],
        times: StageTimes::default(),
    };
    for (i, p) in pixels.into_iter().enumerate() {
        match p {
            Some(b) => {
                let mut c = b.color;
                for ch in 0..3 {
                    c[ch] += bg[ch] * b.remaining;
                }
                out.image.pixels[i] = c;
                out.remaining[i] = b.remaining;
                out.contributors[i] = b.used as u32;
            }
            None => out.image.mask[i] = false,
        }
    }
    Ok(out)
}

/// Mean squared neighbor difference across tile boundaries and inside
/// tiles, over horizontal and vertical neighbor pairs.
pub fn tile_edge_energy(img: &Image, tile_size: usize) -> (f64, f64) {
    let (mut edge, mut ne, mut inner, mut ni) = (0.0, 0usize, 0.0, 0usize);
    let diff = |a: Rgb, b: Rgb| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
    for y in 0..img.height {
        for x in 0..img.width {
            if x + 1 < img.width {
                let d = diff(img.get(x, y), img.get(x + 1, y));
                if (x + 1) % tile_size == 0 {
                    edge += d;
                    ne += 1;
                } else {
                    inner += d;
                    ni += 1;
                }
            }
            if y + 1 < img.height {
                let d = diff(img.get(x, y), img.get(x, y + 1));
                if (y + 1) % tile_size == 0 {
                    edge += d;
                    ne += 1;
                } else {
                    inner += d;
                    ni += 1;
                }
            }
        }
    }
    (edge / ne.max(1) as f64, inner / ni.max(1) as f64)
}
