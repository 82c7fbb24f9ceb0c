//! One test per acceptance criterion. Each prints a PASS or FAIL line
//! straight to stdout, bypassing the test harness capture.

use std::io::Write;
use std::time::Instant;

use gaussray::association::to_view;
use gaussray::camera::{solid_angle_dispersion, Camera, CameraModel, Intrinsics, Pose};
use gaussray::math::{Gaussian3D, Vec3};
use gaussray::raster::Image;
use gaussray::render::{render, render_reference, tile_edge_energy, RenderOptions};
use gaussray::scene::random_scene;
use gaussray::train::{synthetic_problem, train, MetricRow, SyntheticSpec, TrainConfig};
use gaussray::verify::{self, Check, VerifyOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, passed: bool, detail: &str) {
    let line = format!("\ncriterion {id:>2} {} {name}: {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(passed, "criterion {id} failed: {detail}");
}

fn summarize(checks: &[Check]) -> (bool, String) {
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks.iter().map(|c| format!("{} [{}]", c.name, c.detail)).collect::<Vec<_>>().join("; ");
    (passed, detail)
}

fn max_channel_diff(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.mask, b.mask);
    a.pixels.iter().zip(&b.pixels).flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs())).fold(0.0, f64::max)
}

fn bits(img: &Image) -> Vec<u64> {
    img.pixels.iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect()
}

/// The ten scenes and cameras of the tiled-vs-exhaustive comparison.
fn equivalence_cases() -> Vec<(Vec<Gaussian3D>, Camera)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..10)
        .map(|i| {
            let scene = random_scene(&mut rng, 60, i % 4);
            let eye = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let target = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3), 1.0);
            let pose = Pose::look_at(eye, eye + target, Vec3::y()).unwrap();
            let (w, h) = (96, 64);
            let camera = match i % 3 {
                0 => Camera::beap(pose, rng.gen_range(60.0..200.0), rng.gen_range(40.0..120.0), w, h).unwrap(),
                1 => {
                    let f = rng.gen_range(30.0..80.0);
                    let intr = Intrinsics { fx: f, fy: f, cx: w as f64 / 2.0, cy: h as f64 / 2.0 };
                    Camera::new(pose, CameraModel::Pinhole(intr), w, h).unwrap()
                }
                _ => {
                    let f = rng.gen_range(25.0..40.0);
                    let intr = Intrinsics { fx: f, fy: f, cx: w as f64 / 2.0, cy: h as f64 / 2.0 };
                    let k = std::array::from_fn(|_| rng.gen_range(-0.01..0.01));
                    Camera::new(pose, CameraModel::KbFisheye(intr, k), w, h).unwrap()
                }
            };
            (scene, camera)
        })
        .collect()
}

fn synthetic_fit() -> (Vec<Gaussian3D>, Vec<MetricRow>, f64) {
    let config = TrainConfig::default();
    let problem = synthetic_problem(&SyntheticSpec::default(), &config).unwrap();
    let t = Instant::now();
    let (scene, log) = train(problem.init, problem.views, config).unwrap();
    (scene, log, t.elapsed().as_secs_f64())
}

#[test]
fn c01_transmittance_exactness() {
    let t = Instant::now();
    let checks = verify::transmittance_checks(&VerifyOptions::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (passed, detail) = summarize(&checks[..1]);
    report(1, "transmittance exactness", passed && secs < 60.0, &format!("{detail} in {secs:.1}s"));
}

#[test]
fn c02_gradient_exactness() {
    let t = Instant::now();
    let checks = verify::gradient_checks(&VerifyOptions::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (passed, detail) = summarize(&checks);
    report(2, "gradient exactness", passed && secs < 120.0, &format!("{detail} in {secs:.1}s"));
}

#[test]
fn c03_numerical_stability() {
    let checks = verify::stability_checks(&VerifyOptions::default()).unwrap();
    let (passed, detail) = summarize(&checks);
    report(3, "numerical stability regression", passed, &detail);
}

#[test]
fn c04_pbf_tangency_and_soundness() {
    let checks = verify::association_checks(&VerifyOptions::default()).unwrap();
    let (passed, detail) = summarize(&checks);
    report(4, "PBF tangency and soundness", passed, &detail);
}

#[test]
fn c05_tiled_equals_exhaustive() {
    let opts = RenderOptions::default();
    let mut worst = 0.0f64;
    for (scene, camera) in equivalence_cases() {
        let tiled = render(&scene, &camera, &opts).unwrap().image;
        let reference = render_reference(&scene, &camera, &opts).unwrap().image;
        worst = worst.max(max_channel_diff(&tiled, &reference));
    }
    report(
        5,
        "exact-association rendering equivalence",
        worst <= 1e-6,
        &format!("10 scenes, max channel difference {worst:.3e}"),
    );
}

#[test]
fn c06_wide_fov_mirror_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = RenderOptions::default();
    let (mut worst, mut extra, mut behind, mut ratio) = (0.0f64, 0.0f64, 0, 0.0f64);
    for _ in 0..5 {
        let scene = random_scene(&mut rng, 80, 1);
        let camera = Camera::beap(Pose::identity(), 300.0, 150.0, 160, 80).unwrap();
        behind += scene
            .iter()
            .filter(|g| {
                let v = to_view(g, &camera.pose).unwrap().mean;
                v.x.atan2(v.z).abs() > std::f64::consts::FRAC_PI_2
            })
            .count();
        let tiled = render(&scene, &camera, &opts).unwrap().image;
        let reference = render_reference(&scene, &camera, &opts).unwrap().image;
        worst = worst.max(max_channel_diff(&tiled, &reference));
        let (te, ti) = tile_edge_energy(&tiled, opts.tile_size);
        let (re, ri) = tile_edge_energy(&reference, opts.tile_size);
        extra = extra.max(((te - ti) - (re - ri)).abs());
        ratio = ratio.max(te / ti.max(1e-300));
    }
    let passed = behind > 0 && worst <= 1e-6 && extra == 0.0;
    report(
        6,
        "wide-FoV mirror correctness",
        passed,
        &format!(
            "5 scenes at 300 deg, {behind} Gaussians past 90 deg, max channel difference {worst:.3e}, \
             extra tile-edge energy {extra:.3e} (edge/interior ratio up to {ratio:.3})"
        ),
    );
}

#[test]
fn c07_ewa_error_ordering() {
    let checks = verify::ewa_checks(&VerifyOptions::default()).unwrap();
    let (passed, detail) = summarize(&checks);
    report(7, "EWA error ordering", passed, &detail);
}

#[test]
fn c08_end_to_end_fit() {
    let (_, log, secs) = synthetic_fit();
    let (first, last) = (log.first().unwrap(), log.last().unwrap());
    let passed = last.psnr > 30.0 && last.iter <= 2000 && secs < 600.0;
    report(
        8,
        "end-to-end fit",
        passed,
        &format!("PSNR {:.2} -> {:.2} dB after {} iterations in {secs:.1}s", first.psnr, last.psnr, last.iter),
    );
}

#[test]
fn c09_beap_uniformity() {
    let n = 128;
    let beap = Camera::beap(Pose::identity(), 120.0, 120.0, n, n).unwrap();
    let c = n as f64 / 2.0;
    let f = c / 60f64.to_radians().tan();
    let pinhole =
        Camera::new(Pose::identity(), CameraModel::Pinhole(Intrinsics { fx: f, fy: f, cx: c, cy: c }), n, n).unwrap();
    let (b, p) = (solid_angle_dispersion(&beap).unwrap(), solid_angle_dispersion(&pinhole).unwrap());
    report(9, "BEAP uniformity", b < p, &format!("solid-angle dispersion at 120 deg: BEAP {b:.4}, pinhole {p:.4}"));
}

#[test]
fn c10_determinism() {
    let opts = RenderOptions::default();
    let renders_match = equivalence_cases().iter().all(|(scene, camera)| {
        bits(&render(scene, camera, &opts).unwrap().image) == bits(&render(scene, camera, &opts).unwrap().image)
    });
    let (scene_a, log_a, _) = synthetic_fit();
    let (scene_b, log_b, _) = synthetic_fit();
    let strip = |log: &[MetricRow]| {
        log.iter().map(|r| (r.iter, r.loss.to_bits(), r.psnr.to_bits(), r.ssim.to_bits())).collect::<Vec<_>>()
    };
    let logs_match = strip(&log_a) == strip(&log_b);
    let scenes_match = scene_a == scene_b;
    report(
        10,
        "determinism",
        renders_match && logs_match && scenes_match,
        &format!(
            "renders identical: {renders_match}, metric logs identical: {logs_match}, scenes identical: {scenes_match}"
        ),
    );
}
