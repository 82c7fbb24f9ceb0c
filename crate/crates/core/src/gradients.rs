//! Analytic backward pass from per-ray color loss to Gaussian parameters.
//!
//! Gradients are propagated in two stages. The ray-wise stage turns `dL/dT`
//! into gradients of the canonical origin and direction and accumulates the
//! direction part into `dL/dW` immediately. The Gaussian-wise stage adds the
//! origin part (every ray of a frame shares one origin) and contracts `dL/dW`
//! into scale, rotation and mean gradients.

use crate::error::Result;
use crate::math::{self, CanonicalFrame, CanonicalRay, Gaussian3D, Mat3, Ray, Rgb, Vec3};
use crate::sh;

/// Gradients with respect to one Gaussian's parameters.
///
/// `log_scale` is taken with respect to the stored log-scales and `opacity`
/// with respect to the natural opacity in (0, 1). `rotation` is the
/// gradient with respect to the unit quaternion components, not projected
/// onto the tangent space of the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub sh: Vec<Rgb>,
}

impl GaussianGrads {
    pub fn zeros(sh_len: usize) -> Self {
        Self {
            mean: Vec3::zeros(),
            log_scale: Vec3::zeros(),
            rotation: [0.0; 4],
            opacity: 0.0,
            sh: vec![[0.0; 3]; sh_len],
        }
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        self.mean += other.mean;
        self.log_scale += other.log_scale;
        for k in 0..4 {
            self.rotation[k] += other.rotation[k];
        }
        self.opacity += other.opacity;
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.mean == Vec3::zeros()
            && self.log_scale == Vec3::zeros()
            && self.rotation == [0.0; 4]
            && self.opacity == 0.0
            && self.sh.iter().flatten().all(|v| *v == 0.0)
    }
}

/// Forward blending state of one ray, replayable for the backward pass.
#[derive(Clone, Debug)]
pub struct RayBackwardState {
    contributions: Vec<(f64, Rgb)>,
    background: Rgb,
    blend: math::Blend,
}

/// Per-contribution gradients of one ray's blended color.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendGrads {
    pub dl_dt: Vec<f64>,
    pub dl_dc: Vec<Rgb>,
}

impl RayBackwardState {
    pub fn new(contributions: Vec<(f64, Rgb)>, background: Rgb) -> Self {
        let blend = math::composite_blend(contributions.iter().copied());
        Self { contributions, background, blend }
    }

    pub fn blend(&self) -> &math::Blend {
        &self.blend
    }

    /// Blended color including the background seen through the remaining transmittance.
    pub fn color(&self) -> Rgb {
        let mut c = self.blend.color;
        for ch in 0..3 {
            c[ch] += self.background[ch] * self.blend.remaining;
        }
        c
    }

    /// Replays the blend front to back. Contributions cut off by early
    /// termination receive zero gradient.
    pub fn backward(&self, dl_dcolor: &Rgb) -> BlendGrads {
        let n = self.contributions.len();
        let mut dl_dt = vec![0.0; n];
        let mut dl_dc = vec![[0.0; 3]; n];
        let total = self.color();
        let mut acc = [0.0; 3];
        let mut remaining = 1.0;
        for (i, (t, c)) in self.contributions.iter().take(self.blend.used).enumerate() {
            let w = t * remaining;
            let mut g = 0.0;
            for ch in 0..3 {
                acc[ch] += c[ch] * w;
                let behind = total[ch] - acc[ch];
                g += dl_dcolor[ch] * (c[ch] * remaining - behind / (1.0 - t));
                dl_dc[i][ch] = dl_dcolor[ch] * w;
            }
            dl_dt[i] = g;
            remaining *= 1.0 - t;
        }
        BlendGrads { dl_dt, dl_dc }
    }
}

/// Gradients of `C = sum c_i T_i prod_{j<i}(1 - T_j)` with respect to every `T_i` and `c_i`.
pub fn grad_blend(contributions: &[(f64, Rgb)], dl_dcolor: &Rgb) -> BlendGrads {
    RayBackwardState::new(contributions.to_vec(), [0.0; 3]).backward(dl_dcolor)
}

/// Splits `dL/dT` for `T = sigma * alpha`, `alpha = exp(-kappa/2)`, into
/// `(dL/dsigma, dL/dkappa)`.
pub fn grad_kappa_from_t(t: f64, alpha: f64, dl_dt: f64) -> (f64, f64) {
    (dl_dt * alpha, dl_dt * (-0.5 * t))
}

/// Gradients of the loss with respect to the canonical moment, origin and direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalRayGrads {
    pub moment: Vec3,
    pub origin: Vec3,
    pub direction: Vec3,
}

pub fn grad_canonical_ray(cr: &CanonicalRay, kappa: f64, dl_dkappa: f64) -> CanonicalRayGrads {
    canonical_ray_partials(cr, kappa, dl_dkappa, false)
}

/// With `m = o x d`, `dkappa/do = d x dkappa/dm` and the moment part of
/// `dkappa/dd` is `dkappa/dm x o`.
pub(crate) fn canonical_ray_partials(cr: &CanonicalRay, kappa: f64, dl_dkappa: f64, flip: bool) -> CanonicalRayGrads {
    let dd = cr.direction.norm_squared();
    let dm = cr.moment * (2.0 / dd * dl_dkappa);
    let origin = cr.direction.cross(&dm);
    let cross_term = if flip { cr.origin.cross(&dm) } else { dm.cross(&cr.origin) };
    let direction = cr.direction * (-2.0 * kappa / dd * dl_dkappa) + cross_term;
    CanonicalRayGrads { moment: dm, origin, direction }
}

/// `dL/dW = (dL/dd_u) d^T + (dL/do_u) (o - mu)^T`.
pub fn grad_whitening(dl_dorigin: &Vec3, dl_ddirection: &Vec3, ray: &Ray, mean: &Vec3) -> Mat3 {
    dl_ddirection * ray.direction.transpose() + dl_dorigin * (ray.origin - mean).transpose()
}

/// Contracts `dL/dW` into log-scale and quaternion gradients.
pub fn grad_scale_rotation(dl_dw: &Mat3, g: &Gaussian3D) -> Result<(Vec3, [f64; 4])> {
    let frame = math::whitening(g)?;
    let s = g.scale();
    // dW[k][j]/ds_k = -R[j][k] / s_k^2 = -W[k][j] / s_k; times s_k for log space.
    let mut dlog = Vec3::zeros();
    for k in 0..3 {
        let mut acc = 0.0;
        for j in 0..3 {
            acc -= dl_dw[(k, j)] * frame.whitening[(k, j)];
        }
        dlog[k] = acc;
    }

    let [qr, qi, qj, qk] = g.unit_quaternion()?;
    let (a, b, c) = (1.0 / s.x, 1.0 / s.y, 1.0 / s.z);
    let d_qr = Mat3::new(0.0, qk * a, -qj * a, -qk * b, 0.0, qi * b, qj * c, -qi * c, 0.0);
    let d_qi = Mat3::new(0.0, qj * a, qk * a, qj * b, -2.0 * qi * b, qr * b, qk * c, -qr * c, -2.0 * qi * c);
    let d_qj = Mat3::new(-2.0 * qj * a, qi * a, -qr * a, qi * b, 0.0, qk * b, qr * c, qk * c, -2.0 * qj * c);
    let d_qk = Mat3::new(-2.0 * qk * a, qr * a, qi * a, -qr * b, -2.0 * qk * b, qj * b, qi * c, qj * c, 0.0);
    let contract = |m: &Mat3| 2.0 * dl_dw.component_mul(m).sum();
    Ok((dlog, [contract(&d_qr), contract(&d_qi), contract(&d_qj), contract(&d_qk)]))
}

/// Chains a unit-quaternion gradient through normalization of the stored
/// (unnormalized) quaternion `q`.
pub fn grad_through_normalize(q: [f64; 4], dq_unit: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u = q.map(|v| v / n);
    let along: f64 = (0..4).map(|i| u[i] * dq_unit[i]).sum();
    std::array::from_fn(|i| (dq_unit[i] - u[i] * along) / n)
}

/// `dL/dmu = -W^T dL/do_u`.
pub fn grad_mean(dl_dorigin: &Vec3, frame: &CanonicalFrame) -> Vec3 {
    -(frame.whitening.transpose() * dl_dorigin)
}

/// Ray-wise accumulator for one Gaussian: everything that depends on the
/// individual ray direction is folded in here, the rest waits for
/// [`GradAccumulator::finish`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator {
    pub dl_dorigin: Vec3,
    pub dl_dw_ray: Mat3,
    pub dl_dopacity: f64,
    pub dl_dcolor: Rgb,
}

impl Default for GradAccumulator {
    fn default() -> Self {
        Self { dl_dorigin: Vec3::zeros(), dl_dw_ray: Mat3::zeros(), dl_dopacity: 0.0, dl_dcolor: [0.0; 3] }
    }
}

impl GradAccumulator {
    /// Adds one ray's contribution given `dL/dT`, the canonical ray and its
    /// world direction.
    pub fn add_ray(&mut self, cr: &CanonicalRay, direction: &Vec3, opacity: f64, dl_dt: f64) {
        self.add_ray_with(cr, direction, opacity, dl_dt, false)
    }

    pub(crate) fn add_ray_with(&mut self, cr: &CanonicalRay, direction: &Vec3, opacity: f64, dl_dt: f64, flip: bool) {
        if dl_dt == 0.0 {
            return;
        }
        let dd = cr.direction.norm_squared();
        let kappa = cr.moment.norm_squared() / dd;
        let alpha = (-0.5 * kappa).exp();
        let (d_op, d_kappa) = grad_kappa_from_t(opacity * alpha, alpha, dl_dt);
        let grads = canonical_ray_partials(cr, kappa, d_kappa, flip);
        self.dl_dopacity += d_op;
        self.dl_dorigin += grads.origin;
        self.dl_dw_ray += grads.direction * direction.transpose();
    }

    pub fn add_color(&mut self, dl_dcolor: &Rgb) {
        for ch in 0..3 {
            self.dl_dcolor[ch] += dl_dcolor[ch];
        }
    }

    pub fn merge(&mut self, other: &GradAccumulator) {
        self.dl_dorigin += other.dl_dorigin;
        self.dl_dw_ray += other.dl_dw_ray;
        self.dl_dopacity += other.dl_dopacity;
        self.add_color(&other.dl_dcolor);
    }

    /// Gaussian-wise stage: completes `dL/dW` with the shared-origin term and
    /// converts everything into parameter gradients.
    pub fn finish(&self, g: &Gaussian3D, ray_origin: &Vec3) -> Result<GaussianGrads> {
        let frame = math::whitening(g)?;
        let dl_dw = self.dl_dw_ray + self.dl_dorigin * (ray_origin - g.mean).transpose();
        let (log_scale, rotation) = grad_scale_rotation(&dl_dw, g)?;
        let mean = grad_mean(&self.dl_dorigin, &frame);
        let mut dsh = vec![[0.0; 3]; g.sh.len()];
        if self.dl_dcolor != [0.0; 3] {
            let view = view_direction(g, ray_origin);
            sh::sh_backward(&g.sh, &view, &self.dl_dcolor, &mut dsh)?;
        }
        Ok(GaussianGrads { mean, log_scale, rotation, opacity: self.dl_dopacity, sh: dsh })
    }
}

/// Direction from the optical center to the Gaussian, used for SH color.
/// Treated as constant with respect to the mean in the backward pass.
pub fn view_direction(g: &Gaussian3D, origin: &Vec3) -> Vec3 {
    let v = g.mean - origin;
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vec3::z()
    }
}

/// Full chain for one Gaussian and one ray: `dL/dT` (and optionally the
/// color gradient) to every parameter.
pub fn backward_ray(g: &Gaussian3D, ray: &Ray, dl_dt: f64, dl_dcolor: &Rgb) -> Result<GaussianGrads> {
    backward_ray_with(g, ray, dl_dt, dl_dcolor, false)
}

pub(crate) fn backward_ray_with(
    g: &Gaussian3D,
    ray: &Ray,
    dl_dt: f64,
    dl_dcolor: &Rgb,
    flip: bool,
) -> Result<GaussianGrads> {
    let frame = math::whitening(g)?;
    let cr = math::canonical_ray(&frame, ray);
    math::mahalanobis_sq(&cr)?;
    let mut acc = GradAccumulator::default();
    acc.add_ray_with(&cr, &ray.direction, g.opacity(), dl_dt, flip);
    acc.add_color(dl_dcolor);
    acc.finish(g, &ray.origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{canonical_ray, mahalanobis_sq, transmittance, whitening};
    use crate::oracle::finite_diff::central_diff;

    fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= (rel * a.abs().max(b.abs())).max(abs)
    }

    #[test]
    fn blend_single() {
        let g = grad_blend(&[(0.5, [1.0, 0.0, 0.0])], &[1.0, 0.0, 0.0]);
        assert_eq!(g.dl_dt, vec![1.0]);
        assert_eq!(g.dl_dc[0], [0.5, 0.0, 0.0]);
    }

    #[test]
    fn blend_two_hand_expanded() {
        // C = c1 T1 + c2 T2 (1 - T1)
        let (t1, t2) = (0.3, 0.6);
        let (c1, c2) = ([0.2, 0.7, 0.1], [0.9, 0.4, 0.5]);
        let up = [0.3, -1.0, 2.0];
        let g = grad_blend(&[(t1, c1), (t2, c2)], &up);
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for ch in 0..3 {
            d1 += up[ch] * (c1[ch] - c2[ch] * t2);
            d2 += up[ch] * c2[ch] * (1.0 - t1);
        }
        assert!((g.dl_dt[0] - d1).abs() < 1e-14);
        assert!((g.dl_dt[1] - d2).abs() < 1e-14);
        for ch in 0..3 {
            assert!((g.dl_dc[0][ch] - up[ch] * t1).abs() < 1e-15);
            assert!((g.dl_dc[1][ch] - up[ch] * t2 * (1.0 - t1)).abs() < 1e-15);
        }
    }

    #[test]
    fn blend_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let contribs: Vec<(f64, Rgb)> =
                (0..10).map(|_| (rng.gen_range(0.0..0.6), [rng.gen(), rng.gen(), rng.gen()])).collect();
            let up = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let bg = [0.2, 0.1, 0.4];
            let state = RayBackwardState::new(contribs.clone(), bg);
            let g = state.backward(&up);
            let loss = |c: &[(f64, Rgb)]| {
                let col = RayBackwardState::new(c.to_vec(), bg).color();
                (0..3).map(|ch| up[ch] * col[ch]).sum::<f64>()
            };
            for i in 0..10 {
                let fd = central_diff(
                    |x| {
                        let mut c = contribs.clone();
                        c[i].0 = x;
                        loss(&c)
                    },
                    contribs[i].0,
                    1e-5,
                );
                assert!(rel_close(g.dl_dt[i], fd, 1e-5, 1e-9), "{i}: {} vs {fd}", g.dl_dt[i]);
            }
        }
    }

    #[test]
    fn kappa_from_t_examples() {
        assert_eq!(grad_kappa_from_t(1.0, 1.0, 1.0), (1.0, -0.5));
        let alpha = (-1.0f64).exp();
        let (ds, dk) = grad_kappa_from_t(0.8 * alpha, alpha, 1.0);
        assert!((ds - alpha).abs() < 1e-16);
        assert!((dk + 0.4 * alpha).abs() < 1e-16);
    }

    #[test]
    fn canonical_ray_examples() {
        let cr = CanonicalRay::from_parts(Vec3::new(3.0, 4.0, 0.0), Vec3::z());
        let g = grad_canonical_ray(&cr, 25.0, 1.0);
        assert_eq!(g.moment, Vec3::new(8.0, -6.0, 0.0));
        assert_eq!(g.origin, Vec3::new(6.0, 8.0, 0.0));

        let cr = CanonicalRay::from_parts(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.5, 1.0, 1.5));
        let g = grad_canonical_ray(&cr, 0.0, 1.0);
        assert_eq!(g.origin, Vec3::zeros());
        assert_eq!(g.direction, Vec3::zeros());
    }

    #[test]
    fn canonical_ray_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let o = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let d = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let cr = CanonicalRay::from_parts(o, d);
            let kappa = mahalanobis_sq(&cr).unwrap();
            let g = grad_canonical_ray(&cr, kappa, 1.0);
            for k in 0..3 {
                let fo = central_diff(
                    |x| {
                        let mut oo = o;
                        oo[k] = x;
                        mahalanobis_sq(&CanonicalRay::from_parts(oo, d)).unwrap()
                    },
                    o[k],
                    1e-5,
                );
                let fdir = central_diff(
                    |x| {
                        let mut dd = d;
                        dd[k] = x;
                        mahalanobis_sq(&CanonicalRay::from_parts(o, dd)).unwrap()
                    },
                    d[k],
                    1e-5,
                );
                assert!(rel_close(g.origin[k], fo, 1e-5, 1e-7), "o{k}: {} vs {fo}", g.origin[k]);
                assert!(rel_close(g.direction[k], fdir, 1e-5, 1e-7), "d{k}: {} vs {fdir}", g.direction[k]);
            }
        }
    }

    #[test]
    fn whitening_gradient_examples() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z()).unwrap();
        let m = grad_whitening(&Vec3::zeros(), &Vec3::x(), &ray, &Vec3::zeros());
        let mut want = Mat3::zeros();
        want[(0, 2)] = 1.0;
        assert_eq!(m, want);
        assert_eq!(grad_whitening(&Vec3::zeros(), &Vec3::zeros(), &ray, &Vec3::x()), Mat3::zeros());
    }

    #[test]
    fn two_stage_split_equals_direct_whitening_derivative() {
        let g = Gaussian3D::from_natural(
            Vec3::new(0.3, -0.2, 1.0),
            Vec3::new(0.5, 1.2, 0.3),
            [0.9, 0.2, -0.3, 0.1],
            0.7,
            vec![[0.0; 3]],
        );
        let ray = Ray::new(Vec3::new(0.1, 0.4, -3.0), Vec3::new(0.1, -0.15, 1.0)).unwrap();
        let frame = whitening(&g).unwrap();
        let cr = canonical_ray(&frame, &ray);
        let kappa = mahalanobis_sq(&cr).unwrap();
        let grads = grad_canonical_ray(&cr, kappa, 1.0);
        let split = grad_whitening(&grads.origin, &grads.direction, &ray, &g.mean);
        for r in 0..3 {
            for c in 0..3 {
                let fd = central_diff(
                    |x| {
                        let mut w = frame.whitening;
                        w[(r, c)] = x;
                        let f = CanonicalFrame { whitening: w, mean: g.mean };
                        mahalanobis_sq(&canonical_ray(&f, &ray)).unwrap()
                    },
                    frame.whitening[(r, c)],
                    1e-6,
                );
                assert!(rel_close(split[(r, c)], fd, 1e-6, 1e-8), "({r},{c}) {} vs {fd}", split[(r, c)]);
            }
        }
    }

    #[test]
    fn scale_rotation_examples() {
        let g = Gaussian3D::from_natural(
            Vec3::zeros(),
            Vec3::new(1.0, 1.0, 1.0),
            [1.0, 0.0, 0.0, 0.0],
            0.5,
            vec![[0.0; 3]],
        );
        let (ds, dq) = grad_scale_rotation(&Mat3::identity(), &g).unwrap();
        assert_eq!(ds, Vec3::new(-1.0, -1.0, -1.0));
        assert_eq!(dq[0], 0.0);
        let (ds, dq) = grad_scale_rotation(&Mat3::zeros(), &g).unwrap();
        assert_eq!(ds, Vec3::zeros());
        assert_eq!(dq, [0.0; 4]);
    }

    #[test]
    fn mean_examples() {
        let f = CanonicalFrame { whitening: Mat3::identity(), mean: Vec3::zeros() };
        assert_eq!(grad_mean(&Vec3::new(1.0, 2.0, 3.0), &f), Vec3::new(-1.0, -2.0, -3.0));
        assert_eq!(grad_mean(&Vec3::zeros(), &f), Vec3::zeros());
    }

    #[test]
    fn backward_ray_opacity_gradient_is_alpha() {
        let g = Gaussian3D::from_natural(
            Vec3::new(0.2, 0.1, 4.0),
            Vec3::new(0.5, 0.3, 0.7),
            [1.0, 0.2, 0.0, 0.1],
            0.6,
            vec![[0.0; 3]],
        );
        let ray = Ray::new(Vec3::zeros(), Vec3::new(0.0, 0.05, 1.0)).unwrap();
        let t = transmittance(&g, &ray).unwrap();
        let grads = backward_ray(&g, &ray, 1.0, &[0.0; 3]).unwrap();
        assert!((grads.opacity - t / g.opacity()).abs() < 1e-15);
        let zero = backward_ray(&g, &ray, 0.0, &[0.0; 3]).unwrap();
        assert!(zero.is_zero());
    }

    #[test]
    fn flipped_cross_term_is_wrong() {
        let cr = CanonicalRay::from_parts(Vec3::new(1.0, -0.5, 2.0), Vec3::new(0.3, 0.8, -0.2));
        let kappa = mahalanobis_sq(&cr).unwrap();
        let good = canonical_ray_partials(&cr, kappa, 1.0, false);
        let bad = canonical_ray_partials(&cr, kappa, 1.0, true);
        assert!((good.direction - bad.direction).norm() > 1e-3);
    }

    fn transmittance_params(p: &[f64], sh: &[Rgb]) -> Gaussian3D {
        Gaussian3D {
            mean: Vec3::new(p[0], p[1], p[2]),
            log_scale: Vec3::new(p[3], p[4], p[5]),
            rotation: [p[6], p[7], p[8], p[9]],
            opacity_logit: math::logit(p[10]),
            sh: sh.to_vec(),
        }
    }

    #[test]
    fn full_chain_matches_finite_differences() {
        use crate::oracle::finite_diff::richardson_gradient;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 200 {
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let p: Vec<f64> = vec![
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(2.0..5.0),
                rng.gen_range(-1.5..0.5),
                rng.gen_range(-1.5..0.5),
                rng.gen_range(-1.5..0.5),
                q[0],
                q[1],
                q[2],
                q[3],
                rng.gen_range(0.1..0.9),
            ];
            let sh = vec![[0.0; 3]];
            let g = transmittance_params(&p, &sh);
            let ray =
                Ray::new(Vec3::zeros(), Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 1.0)).unwrap();
            let Ok(t) = transmittance(&g, &ray) else { continue };
            if t < 1e-6 || q.iter().map(|v| v * v).sum::<f64>() < 0.05 {
                continue;
            }
            checked += 1;
            let a = backward_ray(&g, &ray, 1.0, &[0.0; 3]).unwrap();
            let dq = grad_through_normalize(g.rotation, a.rotation);
            let analytic = [a.mean.as_slice(), a.log_scale.as_slice(), &dq, std::slice::from_ref(&a.opacity)].concat();
            let fd =
                richardson_gradient(|x| transmittance(&transmittance_params(x, &sh), &ray).unwrap(), &p, &[1e-3; 11]);
            for i in 0..p.len() {
                assert!(rel_close(analytic[i], fd[i], 1e-5, 1e-8), "param {i}: {} vs {}", analytic[i], fd[i]);
            }
        }
    }

    #[test]
    fn normalize_chain_is_tangent() {
        let q = [0.5, -1.0, 2.0, 0.3];
        let g = grad_through_normalize(q, [1.0, 2.0, 3.0, 4.0]);
        assert!((0..4).map(|i| g[i] * q[i]).sum::<f64>().abs() < 1e-14);
    }
}
