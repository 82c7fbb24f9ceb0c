//! Synthetic scenes for demos, tests and benchmarks.

use rand::Rng;

use crate::math::{Gaussian3D, Vec3};
use crate::sh;

/// Random unit quaternion, uniform on the 3-sphere.
pub fn random_rotation<R: Rng>(rng: &mut R) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Random SH coefficients with a random base color and small higher bands.
pub fn random_sh<R: Rng>(rng: &mut R, degree: usize) -> Vec<[f64; 3]> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
    let mut out = vec![sh::rgb_to_dc(base)];
    for _ in 1..sh::coeff_count(degree) {
        out.push(std::array::from_fn(|_| rng.gen_range(-0.15..0.15)));
    }
    out
}

/// `n` Gaussians scattered on a shell of radius 2 to 6 around the origin,
/// so that a camera at the origin sees them in every direction.
pub fn random_scene<R: Rng>(rng: &mut R, n: usize, sh_degree: usize) -> Vec<Gaussian3D> {
    (0..n)
        .map(|_| {
            let dir = loop {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if v.norm() > 0.1 && v.norm() <= 1.0 {
                    break v.normalize();
                }
            };
            let mean = dir * rng.gen_range(2.0..6.0);
            let scale = Vec3::new(rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6));
            Gaussian3D::from_natural(
                mean,
                scale,
                random_rotation(rng),
                rng.gen_range(0.2..0.95),
                random_sh(rng, sh_degree),
            )
        })
        .collect()
}

/// Like [`random_scene`] but confined to a cone of half-angle `half_angle`
/// around `+z`.
pub fn random_frontal_scene<R: Rng>(rng: &mut R, n: usize, sh_degree: usize, half_angle: f64) -> Vec<Gaussian3D> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let g = random_scene(rng, 1, sh_degree).pop().expect("one gaussian");
        if g.mean.z > 0.0 && g.mean.normalize().z >= half_angle.cos() {
            out.push(g);
        }
    }
    out
}

/// Ten Gaussians fanned across 220 degrees of azimuth, several beyond the
/// sideways horizon, for the demo renders and golden image.
pub fn demo_scene() -> Vec<Gaussian3D> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let azimuths = [-105.0, -80.0, -50.0, -22.0, 0.0, 14.0, 38.0, 66.0, 92.0, 108.0f64];
    azimuths
        .iter()
        .enumerate()
        .map(|(i, az)| {
            let (az, el) = (az.to_radians(), (if i % 2 == 0 { 12.0 } else { -16.0f64 }).to_radians());
            let dist = 3.0 + 0.25 * i as f64;
            let mean = Vec3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos()) * dist;
            let scale = Vec3::new(rng.gen_range(0.3..0.9), rng.gen_range(0.2..0.7), rng.gen_range(0.1..0.4));
            Gaussian3D::from_natural(
                mean,
                scale,
                random_rotation(&mut rng),
                rng.gen_range(0.6..0.95),
                random_sh(&mut rng, 1),
            )
        })
        .collect()
}
