//! Fixed-count Gaussian optimization against posed target images.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Pose};
use crate::error::{Error, Result};
use crate::gradients::{grad_through_normalize, GaussianGrads};
use crate::math::{self, Gaussian3D, Vec3};
use crate::metrics::{photometric_loss, psnr, ssim};
use crate::raster::Image;
use crate::render::{render, PreparedFrame, RenderOptions};
use crate::sh;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub means: f64,
    pub scales: f64,
    pub rotations: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { means: 1.6e-4, scales: 5e-3, rotations: 1e-3, opacity: 5e-2, sh: 2.5e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub ssim_weight: f64,
    pub eval_interval: usize,
    pub seed: u64,
    /// Overrides the extent derived from the camera centers.
    pub extent: Option<f64>,
    pub lambda: f64,
    pub tile_size: usize,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: LearningRates::default(),
            ssim_weight: 0.2,
            eval_interval: 100,
            seed: 42,
            extent: None,
            lambda: 3.0,
            tile_size: 16,
            background: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.lr;
        if [l.means, l.scales, l.rotations, l.opacity, l.sh].iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig("learning rates must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(Error::InvalidConfig(format!("ssim_weight {} outside [0, 1]", self.ssim_weight)));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig("eval_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { lambda: self.lambda, tile_size: self.tile_size, background: self.background, cutoff: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub target: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub wall_ms: f64,
}

/// Mean loss, PSNR and SSIM of a scene over a set of views.
pub fn evaluate(scene: &[Gaussian3D], views: &[View], config: &TrainConfig) -> Result<(f64, f64, f64)> {
    let opts = config.render_options();
    let (mut l, mut p, mut s) = (0.0, 0.0, 0.0);
    for v in views {
        let img = render(scene, &v.camera, &opts)?.image;
        l += photometric_loss(&img, &v.target, config.ssim_weight)?.0;
        p += psnr(&img, &v.target)?;
        s += ssim(&img, &v.target)?;
    }
    let n = views.len() as f64;
    Ok((l / n, p / n, s / n))
}

/// Largest distance of a camera center from their centroid, times 1.1.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    let centers: Vec<Vec3> = cameras.iter().map(|c| c.pose.center()).collect();
    let mean = centers.iter().fold(Vec3::zeros(), |a, c| a + c) / centers.len().max(1) as f64;
    1.1 * centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

pub struct Trainer {
    scene: Vec<Gaussian3D>,
    views: Vec<View>,
    config: TrainConfig,
    extent: f64,
    moments: Vec<Moments>,
    step: usize,
    /// Adam steps since the moments were last reset.
    adam_steps: usize,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    started: Instant,
}

/// Flattened parameter layout per Gaussian: mean, log scale, quaternion,
/// opacity logit, SH.
fn group_of(k: usize) -> usize {
    match k {
        0..=2 => 0,
        3..=5 => 1,
        6..=9 => 2,
        10 => 3,
        _ => 4,
    }
}

impl Trainer {
    pub fn new(scene: Vec<Gaussian3D>, views: Vec<View>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidConfig("training needs at least one view".into()));
        }
        for v in &views {
            if v.target.width != v.camera.width || v.target.height != v.camera.height {
                return Err(Error::ShapeMismatch(format!(
                    "target {}x{} for a {}x{} camera",
                    v.target.width, v.target.height, v.camera.width, v.camera.height
                )));
            }
        }
        for g in &scene {
            sh::degree_from_len(g.sh.len())?;
        }
        let cams: Vec<Camera> = views.iter().map(|v| v.camera).collect();
        let extent = config.extent.unwrap_or_else(|| {
            let e = camera_extent(&cams);
            if e > 0.0 {
                e
            } else {
                1.0
            }
        });
        let moments = scene
            .iter()
            .map(|g| Moments { m: vec![0.0; 11 + 3 * g.sh.len()], v: vec![0.0; 11 + 3 * g.sh.len()] })
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            scene,
            views,
            config,
            extent,
            moments,
            step: 0,
            adam_steps: 0,
            order: Vec::new(),
            rng,
            started: Instant::now(),
        })
    }

    pub fn scene(&self) -> &[Gaussian3D] {
        &self.scene
    }

    pub fn into_scene(self) -> Vec<Gaussian3D> {
        self.scene
    }

    pub fn iteration(&self) -> usize {
        self.step
    }

    /// Continues the iteration count of a resumed run. Adam moments start
    /// from zero.
    pub fn resume_at(&mut self, iteration: usize) {
        self.step = iteration;
    }

    fn next_view(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
        }
        self.order.pop().expect("non-empty order")
    }

    /// One optimization step on the next view. Returns the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let vi = self.next_view();
        let view = &self.views[vi];
        let opts = self.config.render_options();
        let frame = PreparedFrame::new(&self.scene, &view.camera, &opts)?;
        let image = frame.forward().image;
        let (loss, dl_dimage) = photometric_loss(&image, &view.target, self.config.ssim_weight)?;
        if !loss.is_finite() {
            log::error!("non-finite loss at iteration {} on view {vi}", self.step);
            return Err(Error::NonFiniteLoss { iteration: self.step });
        }
        let grads = frame.backward(&dl_dimage)?;
        drop(frame);
        self.apply(&grads)?;
        Ok(loss)
    }

    fn apply(&mut self, grads: &[GaussianGrads]) -> Result<()> {
        self.step += 1;
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let lr = self.config.lr;
        let rates = [lr.means * self.extent, lr.scales, lr.rotations, lr.opacity, lr.sh];
        for ((g, d), mom) in self.scene.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            if !d.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: self.step });
            }
            let sigma = g.opacity();
            let dq = grad_through_normalize(g.rotation, d.rotation);
            let mut flat: Vec<f64> = Vec::with_capacity(mom.m.len());
            flat.extend(d.mean.iter());
            flat.extend(d.log_scale.iter());
            flat.extend(dq);
            flat.push(d.opacity * sigma * (1.0 - sigma));
            flat.extend(d.sh.iter().flatten());
            let mut params: Vec<f64> = Vec::with_capacity(flat.len());
            params.extend(g.mean.iter());
            params.extend(g.log_scale.iter());
            params.extend(g.rotation);
            params.push(g.opacity_logit);
            params.extend(g.sh.iter().flatten());
            for k in 0..flat.len() {
                let rate = rates[group_of(k)];
                if rate == 0.0 {
                    continue;
                }
                mom.m[k] = BETA1 * mom.m[k] + (1.0 - BETA1) * flat[k];
                mom.v[k] = BETA2 * mom.v[k] + (1.0 - BETA2) * flat[k] * flat[k];
                params[k] -= rate * (mom.m[k] / c1) / ((mom.v[k] / c2).sqrt() + ADAM_EPS);
            }
            g.mean = Vec3::new(params[0], params[1], params[2]);
            g.log_scale = Vec3::new(params[3], params[4], params[5]);
            g.rotation = math::normalize_quaternion([params[6], params[7], params[8], params[9]])?;
            g.opacity_logit = params[10];
            for (b, c) in g.sh.iter_mut().enumerate() {
                for ch in 0..3 {
                    c[ch] = params[11 + 3 * b + ch];
                }
            }
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<MetricRow> {
        let (loss, p, s) = evaluate(&self.scene, &self.views, &self.config)?;
        Ok(MetricRow { iter: self.step, loss, psnr: p, ssim: s, wall_ms: self.started.elapsed().as_secs_f64() * 1e3 })
    }

    /// Runs the configured number of iterations, evaluating every
    /// `eval_interval` steps and after the last one.
    pub fn run(&mut self) -> Result<Vec<MetricRow>> {
        self.run_with(|_, _| Ok(()))
    }

    /// As `run`, calling `on_eval` after each evaluation.
    pub fn run_with<F>(&mut self, mut on_eval: F) -> Result<Vec<MetricRow>>
    where
        F: FnMut(&Trainer, &MetricRow) -> Result<()>,
    {
        let first = self.metrics()?;
        on_eval(self, &first)?;
        let mut log = vec![first];
        while self.step < self.config.iterations {
            self.step()?;
            if self.step.is_multiple_of(self.config.eval_interval) || self.step == self.config.iterations {
                let row = self.metrics()?;
                log::info!("iter {} loss {:.5} psnr {:.2} ssim {:.4}", row.iter, row.loss, row.psnr, row.ssim);
                on_eval(self, &row)?;
                log.push(row);
            }
        }
        Ok(log)
    }
}

pub fn train(
    scene: Vec<Gaussian3D>,
    views: Vec<View>,
    config: TrainConfig,
) -> Result<(Vec<Gaussian3D>, Vec<MetricRow>)> {
    let mut t = Trainer::new(scene, views, config)?;
    let log = t.run()?;
    Ok((t.into_scene(), log))
}

/// Ground truth, rendered views and a perturbed initialization for a
/// synthetic fitting problem.
pub struct SyntheticProblem {
    pub truth: Vec<Gaussian3D>,
    pub init: Vec<Gaussian3D>,
    pub views: Vec<View>,
}

pub struct SyntheticSpec {
    pub gaussians: usize,
    pub views: usize,
    pub resolution: usize,
    pub fov_deg: f64,
    pub sh_degree: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { gaussians: 50, views: 8, resolution: 64, fov_deg: 90.0, sh_degree: 0, seed: 42 }
    }
}

/// Gaussians inside a unit ball, BEAP cameras on a ring of radius 3 looking
/// at the origin.
pub fn synthetic_problem(spec: &SyntheticSpec, config: &TrainConfig) -> Result<SyntheticProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth: Vec<Gaussian3D> = (0..spec.gaussians)
        .map(|_| {
            let p = loop {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if v.norm() <= 1.0 {
                    break v;
                }
            };
            let scale = Vec3::new(rng.gen_range(0.1..0.35), rng.gen_range(0.1..0.35), rng.gen_range(0.1..0.35));
            Gaussian3D::from_natural(
                p,
                scale,
                crate::scene::random_rotation(&mut rng),
                rng.gen_range(0.5..0.9),
                crate::scene::random_sh(&mut rng, spec.sh_degree),
            )
        })
        .collect();
    let opts = config.render_options();
    let views = (0..spec.views)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / spec.views as f64;
            let eye = Vec3::new(3.0 * a.cos(), 0.6 * (2.0 * a).sin(), 3.0 * a.sin());
            let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::y())?;
            let camera = Camera::beap(pose, spec.fov_deg, spec.fov_deg, spec.resolution, spec.resolution)?;
            let target = render(&truth, &camera, &opts)?.image;
            Ok(View { camera, target })
        })
        .collect::<Result<Vec<_>>>()?;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let init = truth
        .iter()
        .map(|g| {
            let mut p = g.clone();
            p.mean += Vec3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * 0.15;
            p.log_scale += Vec3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * 0.4;
            let q: [f64; 4] = std::array::from_fn(|k| g.rotation[k] + 0.3 * normal(&mut rng));
            p.rotation = math::normalize_quaternion(q).unwrap_or(g.rotation);
            p.opacity_logit += 0.8 * normal(&mut rng);
            for c in p.sh.iter_mut() {
                for ch in c.iter_mut() {
                    *ch += 0.6 * normal(&mut rng);
                }
            }
            p
        })
        .collect();
    Ok(SyntheticProblem { truth, init, views })
}
