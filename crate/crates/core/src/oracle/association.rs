//! Brute-force tile association by dense ray sampling.
//!
//! Distances are computed from the world precision matrix, independently of
//! the canonical-frame code used by the renderer.

use std::collections::BTreeSet;

use nalgebra::Cholesky;
use rayon::prelude::*;

use crate::association::{keep_for_render, to_view, CsfGrid};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{Gaussian3D, Mat3, Vec3};

/// Minimum squared Mahalanobis distance from the line `o + t d` to the
/// Gaussian, and whether the forward half-ray `t >= 0` attains a point
/// within `lambda`.
pub fn ray_distance(precision: &Mat3, mean: &Vec3, origin: &Vec3, dir: &Vec3, lambda: f64) -> (f64, bool) {
    let v = origin - mean;
    let pv = precision * v;
    let pd = precision * dir;
    let dpd = dir.dot(&pd);
    let vpv = v.dot(&pv);
    let dpv = dir.dot(&pv);
    let kappa = (vpv - dpv * dpv / dpd).max(0.0);
    let l2 = lambda * lambda;
    (kappa, kappa <= l2 && (dpv < 0.0 || vpv <= l2))
}

pub fn precision(g: &Gaussian3D) -> Result<Mat3> {
    let cov = g.covariance()?;
    Cholesky::new(cov).map(|c| c.inverse()).ok_or(Error::NotSpd)
}

/// Sample rays of a tile. BEAP tiles get an `n x n` lattice spanning the
/// tile's pixel rectangle edge to edge; other models use the pixel centers.
pub fn tile_rays(camera: &Camera, grid: &CsfGrid, tile: usize, n: usize) -> Vec<Vec3> {
    let (x0, x1, y0, y1) = grid.tile_pixels(tile);
    let mut out = Vec::new();
    if camera.is_beap() {
        let n = n.max(2);
        for j in 0..n {
            let yp = y0 as f64 + (y1 - y0) as f64 * j as f64 / (n - 1) as f64;
            for i in 0..n {
                let xp = x0 as f64 + (x1 - x0) as f64 * i as f64 / (n - 1) as f64;
                if let Ok(d) = camera.direction_at(xp, yp) {
                    out.push(camera.pose.dir_to_world(&d));
                }
            }
        }
    } else {
        for y in y0..y1 {
            for x in x0..x1 {
                if let Ok(d) = camera.pixel_direction(x, y) {
                    out.push(camera.pose.dir_to_world(&d));
                }
            }
        }
    }
    out
}

/// Per-tile sets of Gaussians hit by at least one sampled ray.
pub fn association_bruteforce(
    scene: &[Gaussian3D],
    camera: &Camera,
    grid: &CsfGrid,
    lambda: f64,
    rays_per_side: usize,
) -> Result<Vec<BTreeSet<u32>>> {
    let center = camera.pose.center();
    let kept: Vec<Option<Mat3>> = scene
        .iter()
        .map(|g| {
            let vg = to_view(g, &camera.pose)?;
            Ok(if keep_for_render(&vg, g, &center, lambda)? { precision(g).ok() } else { None })
        })
        .collect::<Result<_>>()?;
    Ok((0..grid.tile_count())
        .into_par_iter()
        .map(|tile| {
            let rays = tile_rays(camera, grid, tile, rays_per_side);
            kept.iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let p = p.as_ref()?;
                    rays.iter().any(|d| ray_distance(p, &scene[i].mean, &center, d, lambda).1).then_some(i as u32)
                })
                .collect()
        })
        .collect())
}

/// Gaussians listed by a render graph but missing from the brute-force sets
/// are fine; the reverse is a false negative. Returns `(tile, gaussian)` pairs.
pub fn false_negatives(graph_sets: &[BTreeSet<u32>], brute: &[BTreeSet<u32>]) -> Vec<(usize, u32)> {
    brute.iter().enumerate().flat_map(|(t, s)| s.difference(&graph_sets[t]).map(move |g| (t, *g))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Pose;

    #[test]
    fn single_centered_gaussian_hits_central_tiles() {
        let cam = Camera::beap(Pose::identity(), 90.0, 90.0, 64, 64).unwrap();
        let grid = CsfGrid::new(&cam, 16).unwrap();
        let g = Gaussian3D::from_natural(
            Vec3::new(0.0, 0.0, 10.0),
            Vec3::new(0.1, 0.1, 0.1),
            [1.0, 0.0, 0.0, 0.0],
            0.9,
            vec![[0.0; 3]],
        );
        let sets = association_bruteforce(&[g], &cam, &grid, 3.0, 8).unwrap();
        let hit: Vec<usize> = (0..sets.len()).filter(|t| !sets[*t].is_empty()).collect();
        assert_eq!(hit, vec![5, 6, 9, 10]);
    }

    #[test]
    fn gaussian_behind_is_absent() {
        let cam = Camera::beap(Pose::identity(), 90.0, 90.0, 32, 32).unwrap();
        let grid = CsfGrid::new(&cam, 16).unwrap();
        let g = Gaussian3D::from_natural(
            Vec3::new(0.0, 0.0, -10.0),
            Vec3::new(0.5, 0.5, 0.5),
            [1.0, 0.0, 0.0, 0.0],
            0.9,
            vec![[0.0; 3]],
        );
        let sets = association_bruteforce(&[g], &cam, &grid, 3.0, 8).unwrap();
        assert!(sets.iter().all(BTreeSet::is_empty));
    }

    #[test]
    fn distance_matches_sampled_minimum() {
        let g = Gaussian3D::from_natural(
            Vec3::new(0.4, -0.2, 3.0),
            Vec3::new(0.2, 0.5, 0.1),
            [0.8, 0.3, -0.1, 0.4],
            0.5,
            vec![[0.0; 3]],
        );
        let p = precision(&g).unwrap();
        let o = Vec3::zeros();
        let d = Vec3::new(0.1, 0.0, 1.0);
        let (kappa, _) = ray_distance(&p, &g.mean, &o, &d, 3.0);
        let sampled = (0..200_001)
            .map(|i| {
                let x = o + d * (i as f64 * 1e-4) - g.mean;
                x.dot(&(p * x))
            })
            .fold(f64::INFINITY, f64::min);
        assert!((kappa - sampled).abs() < 1e-6 * sampled.max(1.0));
    }
}
