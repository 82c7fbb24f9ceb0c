//! Compares tile association from tangent bounding frusta against a
//! bounding sphere of radius lambda * largest scale, and against the
//! brute-force ray oracle, for wide BEAP cameras.
//!
//! cargo run --release --example association_tightness

use gaussray::association::{build_render_graph, effective_bounds, keep_for_render, solve_pbf, to_view, CsfGrid};
use gaussray::camera::{Camera, Pose};
use gaussray::math::Mat3;
use gaussray::verify::{association_scene, association_soundness};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gaussray::Result<()> {
    let lambda = 3.0;
    println!("{:>8} {:>10} {:>10} {:>10} {:>8}", "fov_deg", "frustum", "sphere", "oracle", "misses");
    for fov in [90.0, 150.0, 210.0, 270.0, 300.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let camera = Camera::beap(Pose::identity(), fov, 120.0, 192, 96)?;
        let grid = CsfGrid::new(&camera, 16)?;
        let (mut tight, mut sphere, mut oracle, mut misses) = (0, 0, 0, 0);
        for _ in 0..10 {
            let scene = association_scene(&mut rng, 100);
            let stats = association_soundness(&scene, &camera, 16, lambda)?;
            tight += build_render_graph(&scene, &camera, &grid, lambda)?.gaussians.len();
            oracle += stats.brute_entries;
            misses += stats.false_negatives;
            for g in &scene {
                let mut vg = to_view(g, &camera.pose)?;
                if !keep_for_render(&vg, g, &camera.pose.center(), lambda)? {
                    continue;
                }
                // isotropic stand-in with the largest axis
                vg.cov = Mat3::identity() * g.scale().max().powi(2);
                let bounds = match solve_pbf(&vg, lambda) {
                    Ok(p) => effective_bounds(&p, &vg.mean),
                    Err(_) => continue,
                };
                sphere += (0..grid.tile_count()).filter(|t| grid.overlaps(*t, &bounds)).count();
            }
        }
        println!("{fov:>8.0} {tight:>10} {sphere:>10} {oracle:>10} {misses:>8}");
    }
    Ok(())
}
