//! Oracle-backed property suites, shared by the `verify` command and the
//! acceptance tests.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::association::{self, build_render_graph, CsfGrid, ViewGaussian};
use crate::camera::{Camera, Pose};
use crate::error::{Error, Result};
use crate::gradients::{backward_ray_with, grad_through_normalize, view_direction, RayBackwardState};
use crate::math::{self, CanonicalRay, Gaussian3D, Mat3, Ray, Rgb, Vec3};
use crate::oracle::association::{association_bruteforce, false_negatives};
use crate::oracle::ewa::{ewa_error, off_axis, EwaEstimate};
use crate::oracle::finite_diff::richardson_gradient;
use crate::oracle::quadrature::{transmittance_quadrature_with, QuadratureSpec, Rule};
use crate::scene::{random_rotation, random_sh};
use crate::sh;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Transmittance,
    Gradients,
    Association,
    Ewa,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "transmittance" => Self::Transmittance,
            "gradients" => Self::Gradients,
            "association" => Self::Association,
            "ewa" => Self::Ewa,
            _ => return Err(Error::InvalidConfig(format!("unknown suite {s}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub transmittance_cases: usize,
    pub gradient_cases: usize,
    pub stability_cases: usize,
    pub association_scenes: usize,
    pub gaussians_per_scene: usize,
    pub ewa_samples: usize,
    /// Test hook: evaluate the moment cross term with swapped operands.
    pub flip_cross_term: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            transmittance_cases: 1000,
            gradient_cases: 500,
            stability_cases: 1000,
            association_scenes: 50,
            gaussians_per_scene: 100,
            ewa_samples: 200_000,
            flip_cross_term: false,
        }
    }
}

impl VerifyOptions {
    /// Reduced case counts for fast smoke runs.
    pub fn quick() -> Self {
        Self {
            transmittance_cases: 100,
            gradient_cases: 50,
            stability_cases: 200,
            association_scenes: 3,
            gaussians_per_scene: 40,
            ewa_samples: 40_000,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Largest residual relative to the check's tolerance; at most 1 when passing.
    pub max_residual: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_residual(&self) -> f64 {
        self.checks.iter().map(|c| c.max_residual).fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {} (max residual {:.3e}, {:.1}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.max_residual(),
            self.seconds
        )?;
        for c in &self.checks {
            writeln!(f, "  {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let all = suite == Suite::All;
    let mut out = Vec::new();
    if all || suite == Suite::Transmittance {
        out.push(timed("transmittance", || transmittance_checks(opts))?);
    }
    if all || suite == Suite::Gradients {
        out.push(timed("gradients", || {
            let mut checks = gradient_checks(opts)?;
            checks.extend(stability_checks(opts)?);
            Ok(checks)
        })?);
    }
    if all || suite == Suite::Association {
        out.push(timed("association", || association_checks(opts))?);
    }
    if all || suite == Suite::Ewa {
        out.push(timed("ewa", || ewa_checks(opts))?);
    }
    Ok(out)
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<Vec<Check>>) -> Result<SuiteReport> {
    let t = Instant::now();
    let checks = f()?;
    Ok(SuiteReport { suite: name, checks, seconds: t.elapsed().as_secs_f64() })
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Gaussian with axis ratio up to `max_ratio` and a ray passing within
/// 2.5 standard deviations of it.
fn random_pair<R: Rng>(rng: &mut R, max_ratio: f64) -> Result<(Gaussian3D, Ray)> {
    let base = log_uniform(rng, 0.01, 1.0);
    let scale =
        Vec3::new(base, base * log_uniform(rng, 1.0, max_ratio), base * log_uniform(rng, 1.0, max_ratio.sqrt()));
    let mean = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let g = Gaussian3D::from_natural(mean, scale, random_rotation(rng), rng.gen_range(0.05..1.0), vec![[0.0; 3]]);
    let r = g.rotation_matrix()?;
    let z = random_unit(rng) * rng.gen_range(0.0..2.5);
    let through = mean + r * z.component_mul(&scale);
    let d = random_unit(rng) * rng.gen_range(0.5..2.0);
    let origin = through - d * rng.gen_range(1.0..5.0);
    Ok((g, Ray::new(origin, d)?))
}

pub fn transmittance_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cases: Vec<(Gaussian3D, Ray)> =
        (0..opts.transmittance_cases).map(|_| random_pair(&mut rng, 1e4)).collect::<Result<_>>()?;
    let spec = QuadratureSpec::default();
    let errs: Vec<(f64, Option<f64>)> = cases
        .par_iter()
        .enumerate()
        .map(|(i, (g, ray))| {
            let closed = math::transmittance(g, ray)?;
            let gk = transmittance_quadrature_with(g, ray, &spec, Rule::GaussKronrod)?;
            let rel = (closed - gk).abs() / gk.abs().max(1e-300);
            // the second rule guards the first on a subset
            let rules = if i % 10 == 0 {
                let simpson = transmittance_quadrature_with(g, ray, &spec, Rule::Simpson)?;
                Some((simpson - gk).abs() / gk.abs().max(1e-300))
            } else {
                None
            };
            Ok((rel, rules))
        })
        .collect::<Result<_>>()?;
    let worst = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let worst_rules = errs.iter().filter_map(|e| e.1).fold(0.0, f64::max);
    let n_rules = errs.iter().filter(|e| e.1.is_some()).count();
    Ok(vec![
        Check {
            name: "closed form vs quadrature".into(),
            passed: worst <= 1e-6,
            max_residual: worst / 1e-6,
            detail: format!("{} cases, axis ratio up to 1e4, max relative error {worst:.3e} (tol 1e-6)", cases.len()),
        },
        Check {
            name: "Gauss-Kronrod vs Simpson".into(),
            passed: worst_rules <= 1e-9,
            max_residual: worst_rules / 1e-9,
            detail: format!("{n_rules} cases, max relative difference {worst_rules:.3e} (tol 1e-9)"),
        },
    ])
}

/// Natural-space parameters of one Gaussian: mean, log scale, raw
/// quaternion, opacity, SH.
fn flatten(g: &Gaussian3D) -> Vec<f64> {
    let mut p: Vec<f64> = g.mean.iter().chain(g.log_scale.iter()).copied().collect();
    p.extend(g.rotation);
    p.push(g.opacity());
    p.extend(g.sh.iter().flatten());
    p
}

fn unflatten(p: &[f64]) -> Gaussian3D {
    let sh = p[11..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    Gaussian3D {
        mean: Vec3::new(p[0], p[1], p[2]),
        log_scale: Vec3::new(p[3], p[4], p[5]),
        rotation: [p[6], p[7], p[8], p[9]],
        opacity_logit: math::logit(p[10]),
        sh,
    }
}

struct GradientCase {
    gaussians: Vec<Gaussian3D>,
    ray: Ray,
    weights: Rgb,
    background: Rgb,
    /// View directions frozen at the unperturbed means.
    views: Vec<Vec3>,
}

impl GradientCase {
    fn loss(&self, params: &[Vec<f64>]) -> f64 {
        let contribs: Vec<(f64, Rgb)> = params
            .iter()
            .zip(&self.views)
            .map(|(p, v)| {
                let g = unflatten(p);
                (math::transmittance(&g, &self.ray).unwrap(), sh::sh_eval(&g.sh, v).unwrap())
            })
            .collect();
        let c = RayBackwardState::new(contribs, self.background).color();
        (0..3).map(|k| c[k] * self.weights[k]).sum()
    }

    fn analytic(&self, flip: bool) -> Result<Vec<Vec<f64>>> {
        let contribs: Vec<(f64, Rgb)> = self
            .gaussians
            .iter()
            .zip(&self.views)
            .map(|(g, v)| Ok((math::transmittance(g, &self.ray)?, sh::sh_eval(&g.sh, v)?)))
            .collect::<Result<_>>()?;
        let state = RayBackwardState::new(contribs, self.background);
        let bg = state.backward(&self.weights);
        self.gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let d = backward_ray_with(g, &self.ray, bg.dl_dt[i], &bg.dl_dc[i], flip)?;
                let mut v: Vec<f64> = d.mean.iter().chain(d.log_scale.iter()).copied().collect();
                v.extend(grad_through_normalize(g.rotation, d.rotation));
                v.push(d.opacity);
                v.extend(d.sh.iter().flatten());
                Ok(v)
            })
            .collect()
    }
}

/// Up to three Gaussians strung along one ray at increasing depth.
fn random_gradient_case<R: Rng>(rng: &mut R) -> Result<GradientCase> {
    let d = random_unit(rng);
    let origin = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let ray = Ray::new(origin, d * rng.gen_range(0.5..2.0))?;
    let k = rng.gen_range(1..=3);
    let mut gaussians = Vec::new();
    for i in 0..k {
        let scale = Vec3::new(log_uniform(rng, 0.05, 1.0), log_uniform(rng, 0.05, 1.0), log_uniform(rng, 0.05, 1.0));
        let along = origin + d * (2.0 + 2.5 * i as f64);
        let offset = random_unit(rng) * scale.min() * rng.gen_range(0.0..1.5);
        let raw: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let rotation = if raw.iter().map(|v| v * v).sum::<f64>() > 0.05 { raw } else { [1.0, 0.0, 0.0, 0.0] };
        let degree = rng.gen_range(0..=sh::MAX_DEGREE);
        gaussians.push(Gaussian3D {
            mean: along + offset,
            log_scale: scale.map(f64::ln),
            rotation,
            opacity_logit: math::logit(rng.gen_range(0.1..0.9)),
            sh: random_sh(rng, degree),
        });
    }
    let views = gaussians.iter().map(|g| view_direction(g, &ray.origin)).collect();
    let weights = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let background = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    Ok(GradientCase { gaussians, ray, weights, background, views })
}

pub fn gradient_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37);
    let cases: Vec<GradientCase> =
        (0..opts.gradient_cases).map(|_| random_gradient_case(&mut rng)).collect::<Result<_>>()?;
    let results: Vec<(f64, usize)> = cases
        .par_iter()
        .map(|case| {
            let analytic = case.analytic(opts.flip_cross_term)?;
            let base: Vec<Vec<f64>> = case.gaussians.iter().map(flatten).collect();
            let (mut worst, mut count) = (0.0f64, 0);
            for (gi, p) in base.iter().enumerate() {
                let steps = vec![1e-4; p.len()];
                let fd = richardson_gradient(
                    |x| {
                        let mut all = base.clone();
                        all[gi] = x.to_vec();
                        case.loss(&all)
                    },
                    p,
                    &steps,
                );
                for (a, f) in analytic[gi].iter().zip(&fd) {
                    let tol = (1e-4 * f.abs()).max(1e-7);
                    worst = worst.max((a - f).abs() / tol);
                    count += 1;
                }
            }
            Ok((worst, count))
        })
        .collect::<Result<_>>()?;
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let params: usize = results.iter().map(|r| r.1).sum();
    Ok(vec![Check {
        name: "analytic vs finite differences".into(),
        passed: worst <= 1.0,
        max_residual: worst,
        detail: format!(
            "{} configurations, {params} parameters, worst |error| / max(1e-4 rel, 1e-7 abs) = {worst:.3e}",
            cases.len()
        ),
    }])
}

/// Inputs with a 1e-8 axis and a ray almost parallel to the offset from the
/// center in canonical space.
pub fn stability_inputs(n: usize, seed: u64) -> Result<Vec<(Gaussian3D, Ray)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let rotation = random_rotation(&mut rng);
            let g = Gaussian3D::from_natural(
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                Vec3::new(1e-8, rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)),
                rotation,
                0.8,
                vec![[0.0; 3]],
            );
            let thin = g.rotation_matrix()?.column(0).into_owned();
            let origin = g.mean + thin * rng.gen_range(0.5..2.0);
            let side = random_unit(&mut rng).cross(&thin).normalize();
            let d = -thin + side * rng.gen_range(1e-9..1e-7);
            Ok((g, Ray::new(origin, d)?))
        })
        .collect()
}

pub fn stability_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let inputs = stability_inputs(opts.stability_cases, opts.seed ^ 0x51ab)?;
    let (mut bad_cross, mut bad_expanded, mut bad_grads) = (0, 0, 0);
    for (g, ray) in &inputs {
        let frame = math::whitening(g)?;
        let cr: CanonicalRay = math::canonical_ray(&frame, ray);
        let kappa = math::mahalanobis_sq(&cr);
        if !matches!(kappa, Ok(k) if k.is_finite() && k >= 0.0) {
            bad_cross += 1;
        }
        let expanded = math::mahalanobis_sq_expanded(&cr);
        if !(expanded.is_finite() && expanded >= 0.0) {
            bad_expanded += 1;
        }
        match backward_ray_with(g, ray, 1.0, &[1.0; 3], opts.flip_cross_term) {
            Ok(d) if d.is_finite() => {}
            _ => bad_grads += 1,
        }
    }
    let n = inputs.len();
    Ok(vec![
        Check {
            name: "cross-product distance is stable".into(),
            passed: bad_cross == 0 && bad_grads == 0,
            max_residual: (bad_cross + bad_grads) as f64,
            detail: format!("{n} inputs with a 1e-8 axis: {bad_cross} bad distances, {bad_grads} non-finite gradients"),
        },
        Check {
            name: "expanded distance fails on the same inputs".into(),
            passed: bad_expanded >= 1,
            max_residual: 0.0,
            detail: format!("{bad_expanded} of {n} expanded-form distances negative or non-finite"),
        },
    ])
}

/// Scene for association checks: Gaussians in every direction, a few large
/// or close enough to contain the camera.
pub fn association_scene<R: Rng>(rng: &mut R, n: usize) -> Vec<Gaussian3D> {
    (0..n)
        .map(|_| {
            let mean = random_unit(rng) * log_uniform(rng, 0.3, 8.0);
            let scale =
                Vec3::new(log_uniform(rng, 0.01, 1.5), log_uniform(rng, 0.01, 1.5), log_uniform(rng, 0.01, 1.5));
            Gaussian3D::from_natural(mean, scale, random_rotation(rng), rng.gen_range(0.01..0.99), vec![[0.0; 3]])
        })
        .collect()
}

pub struct AssociationStats {
    pub false_negatives: usize,
    pub graph_entries: usize,
    pub brute_entries: usize,
}

/// Compares one scene's render graph with the brute-force oracle.
pub fn association_soundness(
    scene: &[Gaussian3D],
    camera: &Camera,
    tile: usize,
    lambda: f64,
) -> Result<AssociationStats> {
    let grid = CsfGrid::new(camera, tile)?;
    let graph = build_render_graph(scene, camera, &grid, lambda)?;
    let sets: Vec<BTreeSet<u32>> =
        (0..grid.tile_count()).map(|t| graph.tile_entries(t).iter().copied().collect()).collect();
    let brute = association_bruteforce(scene, camera, &grid, lambda, tile.max(8))?;
    Ok(AssociationStats {
        false_negatives: false_negatives(&sets, &brute).len(),
        graph_entries: graph.gaussians.len(),
        brute_entries: brute.iter().map(BTreeSet::len).sum(),
    })
}

pub fn association_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa550);
    let mut worst_residual = 0.0f64;
    let mut planes = 0;
    while planes < 2000 {
        let (g, _) = random_pair(&mut rng, 1e3)?;
        let vg = ViewGaussian { mean: g.mean + Vec3::z() * 4.0, cov: g.covariance()?, depth: 0.0 };
        let pbf = association::solve_pbf(&vg, 3.0)?;
        if pbf.clamped {
            continue;
        }
        for n in association::pbf_normals(&pbf) {
            worst_residual = worst_residual.max(association::plane_residual(&n, &vg, 3.0).abs());
            planes += 1;
        }
    }
    let sphere =
        association::solve_pbf(&ViewGaussian { mean: Vec3::z() * 5.0, cov: Mat3::identity(), depth: 5.0 }, 3.0)?;
    let sphere_err = (sphere.tan_theta[0] + 0.75)
        .abs()
        .max((sphere.tan_theta[1] - 0.75).abs())
        .max((sphere.tan_phi[0] + 0.75).abs())
        .max((sphere.tan_phi[1] - 0.75).abs());

    let (mut misses, mut graph, mut brute) = (0, 0, 0);
    let mut max_fov = 0.0f64;
    for _ in 0..opts.association_scenes {
        let scene = association_scene(&mut rng, opts.gaussians_per_scene);
        let fov_x = rng.gen_range(120.0..=300.0);
        let fov_y = rng.gen_range(60.0..=170.0);
        max_fov = max_fov.max(fov_x);
        let pose = Pose::look_at(random_unit(&mut rng) * 0.5, random_unit(&mut rng) * 3.0, Vec3::y())
            .or_else(|_| Pose::look_at(Vec3::zeros(), Vec3::z(), Vec3::y()))?;
        let camera = Camera::beap(pose, fov_x, fov_y, 96, 48)?;
        let stats = association_soundness(&scene, &camera, 16, 3.0)?;
        misses += stats.false_negatives;
        graph += stats.graph_entries;
        brute += stats.brute_entries;
    }
    Ok(vec![
        Check {
            name: "bounding planes are tangent".into(),
            passed: worst_residual < 1e-8,
            max_residual: worst_residual / 1e-8,
            detail: format!("{planes} planes, max relative residual {worst_residual:.3e} (tol 1e-8)"),
        },
        Check {
            name: "unit sphere at distance 5".into(),
            passed: sphere_err < 1e-12,
            max_residual: sphere_err / 1e-12,
            detail: format!("tangents +-3/4, error {sphere_err:.3e}"),
        },
        Check {
            name: "no false negatives vs brute force".into(),
            passed: misses == 0,
            max_residual: misses as f64,
            detail: format!(
                "{} scenes, FoV up to {max_fov:.0} deg: {misses} misses, {graph} graph entries vs {brute} brute-force",
                opts.association_scenes
            ),
        },
    ])
}

pub const EWA_ANGLES_DEG: [f64; 5] = [0.0, 17.5, 35.0, 52.5, 70.0];

/// Splatting error of one fixed Gaussian at increasing off-axis angles.
pub fn ewa_sweep(samples: usize, seed: u64) -> Result<Vec<EwaEstimate>> {
    let cov = Mat3::from_diagonal(&Vec3::new(0.09, 0.04, 0.01));
    EWA_ANGLES_DEG
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            ewa_error(&off_axis(2.0, a.to_radians(), cov, 1.0), samples, &mut rng)
        })
        .collect()
}

pub fn ewa_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let sweep = ewa_sweep(opts.ewa_samples, opts.seed)?;
    let increasing = sweep.windows(2).all(|w| w[0].ci95().1 < w[1].ci95().0);
    let detail = EWA_ANGLES_DEG
        .iter()
        .zip(&sweep)
        .map(|(a, e)| format!("{a}deg {:.4}+-{:.4}", e.error, 1.96 * e.std_error))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(vec![Check { name: "error grows with off-axis angle".into(), passed: increasing, max_residual: 0.0, detail }])
}
