//! Gaussian primitive algebra: canonical whitening, closed-form ray
//! transmittance and front-to-back compositing.
//!
//! A Gaussian with mean `mu`, rotation `R` and axis scales `s` is mapped to a
//! unit isotropic Gaussian by the whitening matrix `W = S^-1 R^T`. A world ray
//! `o + t d` becomes `o_u + t d_u` in that frame and the integral of the
//! density along it collapses to `sigma * exp(-kappa / 2)` with
//! `kappa = |o_u x d_u|^2 / |d_u|^2`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Rgb = [f64; 3];

/// Largest per-Gaussian transmittance admitted into blending.
pub const MAX_ALPHA: f64 = 0.999;
/// Blending stops once the remaining transmittance would fall below this.
pub const MIN_REMAINING: f64 = 1e-4;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// World-space 3D Gaussian particle in its stored (optimizable) form.
///
/// Scales are kept as logarithms, opacity as a logit and the rotation as a raw
/// quaternion `(r, i, j, k)` that is renormalized whenever it is read.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// `(deg + 1)^2` RGB coefficient triples, band-major.
    pub sh: Vec<Rgb>,
}

impl Gaussian3D {
    /// Builds a Gaussian from natural parameters (positive scales, opacity in (0, 1)).
    pub fn from_natural(mean: Vec3, scale: Vec3, rotation: [f64; 4], opacity: f64, sh: Vec<Rgb>) -> Self {
        Self { mean, log_scale: scale.map(f64::ln), rotation, opacity_logit: logit(opacity), sh }
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_quaternion(&self) -> Result<[f64; 4]> {
        normalize_quaternion(self.rotation)
    }

    pub fn rotation_matrix(&self) -> Result<Mat3> {
        quat_to_rotation(self.rotation)
    }

    /// World covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Result<Mat3> {
        let r = self.rotation_matrix()?;
        let s2 = Mat3::from_diagonal(&self.scale().map(|s| s * s));
        Ok(r * s2 * r.transpose())
    }

    pub fn sh_degree(&self) -> Result<usize> {
        crate::sh::degree_from_len(self.sh.len())
    }
}

pub fn normalize_quaternion(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a quaternion stored as `(r, i, j, k)`.
///
/// The quaternion is renormalized first. The layout is the one whose
/// transpose (scaled row-wise by `1/s`) is the whitening matrix used by the
/// gradient code.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<Mat3> {
    let [r, i, j, k] = normalize_quaternion(q)?;
    Ok(rotation_from_unit_quaternion([r, i, j, k]))
}

pub(crate) fn rotation_from_unit_quaternion([r, i, j, k]: [f64; 4]) -> Mat3 {
    Mat3::new(
        1.0 - 2.0 * (j * j + k * k),
        2.0 * (i * j - r * k),
        2.0 * (i * k + r * j),
        2.0 * (i * j + r * k),
        1.0 - 2.0 * (i * i + k * k),
        2.0 * (j * k - r * i),
        2.0 * (i * k - r * j),
        2.0 * (j * k + r * i),
        1.0 - 2.0 * (i * i + j * j),
    )
}

/// Per-Gaussian whitening frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalFrame {
    /// `S^-1 R^T`, equal to `Sigma^(-1/2)` up to rotation.
    pub whitening: Mat3,
    pub mean: Vec3,
}

pub fn whitening(g: &Gaussian3D) -> Result<CanonicalFrame> {
    let s = g.scale();
    if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateScale([s.x, s.y, s.z]));
    }
    let rt = g.rotation_matrix()?.transpose();
    let mut w = rt;
    for row in 0..3 {
        for col in 0..3 {
            w[(row, col)] /= s[row];
        }
    }
    Ok(CanonicalFrame { whitening: w, mean: g.mean })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateDirection);
        }
        Ok(Self { origin, direction })
    }
}

/// Ray expressed in a Gaussian's whitened frame, in Plücker form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalRay {
    pub origin: Vec3,
    pub direction: Vec3,
    pub moment: Vec3,
}

impl CanonicalRay {
    pub fn from_parts(origin: Vec3, direction: Vec3) -> Self {
        Self { origin, direction, moment: origin.cross(&direction) }
    }
}

pub fn canonical_ray(frame: &CanonicalFrame, ray: &Ray) -> CanonicalRay {
    let origin = frame.whitening * (ray.origin - frame.mean);
    let direction = frame.whitening * ray.direction;
    CanonicalRay::from_parts(origin, direction)
}

/// Minimum squared Mahalanobis distance between the ray and the Gaussian,
/// computed from the moment vector so it cannot go negative.
pub fn mahalanobis_sq(cr: &CanonicalRay) -> Result<f64> {
    let dd = cr.direction.norm_squared();
    if !(dd > 0.0) {
        return Err(Error::DegenerateDirection);
    }
    Ok(cr.moment.norm_squared() / dd)
}

/// The Lagrange-identity expansion `|o|^2 |d|^2 - (o.d)^2` over `|d|^2`.
///
/// Algebraically equal to [`mahalanobis_sq`] but cancels catastrophically for
/// needle- and disk-shaped Gaussians. Only kept so the failure can be tested.
pub fn mahalanobis_sq_expanded(cr: &CanonicalRay) -> f64 {
    let oo = cr.origin.norm_squared();
    let dd = cr.direction.norm_squared();
    let od = cr.origin.dot(&cr.direction);
    (oo * dd - od * od) / dd
}

/// Closed-form transmittance `sigma * exp(-kappa / 2)` of one Gaussian along a ray.
pub fn transmittance(g: &Gaussian3D, ray: &Ray) -> Result<f64> {
    let frame = whitening(g)?;
    let kappa = mahalanobis_sq(&canonical_ray(&frame, ray))?;
    Ok(g.opacity() * (-0.5 * kappa).exp())
}

/// Outcome of front-to-back blending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blend {
    pub color: Rgb,
    /// Product of `(1 - T_j)` over the blended contributions.
    pub remaining: f64,
    /// Number of leading contributions actually blended.
    pub used: usize,
}

/// Front-to-back alpha compositing `C = sum c_i T_i prod_{j<i} (1 - T_j)`.
///
/// A contribution that would push the remaining transmittance below
/// [`MIN_REMAINING`] terminates the walk and is not blended.
pub fn composite(contributions: &[(f64, Rgb)]) -> Rgb {
    composite_blend(contributions.iter().copied()).color
}

pub fn composite_blend<I>(contributions: I) -> Blend
where
    I: IntoIterator<Item = (f64, Rgb)>,
{
    let mut color = [0.0; 3];
    let mut remaining = 1.0;
    let mut used = 0;
    for (t, c) in contributions {
        let next = remaining * (1.0 - t);
        if next < MIN_REMAINING {
            break;
        }
        let w = t * remaining;
        for ch in 0..3 {
            color[ch] += c[ch] * w;
        }
        remaining = next;
        used += 1;
    }
    Blend { color, remaining, used }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn iso(mean: Vec3, opacity: f64) -> Gaussian3D {
        Gaussian3D::from_natural(mean, Vec3::new(1.0, 1.0, 1.0), [1.0, 0.0, 0.0, 0.0], opacity, vec![[0.0; 3]])
    }

    #[test]
    fn identity_quaternion() {
        let r = quat_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = 0.5f64.sqrt();
        let r = quat_to_rotation([h, 0.0, 0.0, h]).unwrap();
        let x = r * Vec3::x();
        assert!((x - Vec3::y()).norm() < 1e-15);
        let y = r * Vec3::y();
        assert!((y + Vec3::x()).norm() < 1e-15);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(quat_to_rotation([0.0; 4]), Err(Error::DegenerateRotation)));
    }

    #[test]
    fn whitening_diagonal() {
        let g = Gaussian3D::from_natural(
            Vec3::zeros(),
            Vec3::new(2.0, 1.0, 0.5),
            [1.0, 0.0, 0.0, 0.0],
            0.5,
            vec![[0.0; 3]],
        );
        let f = whitening(&g).unwrap();
        let expect = Mat3::from_diagonal(&Vec3::new(0.5, 1.0, 2.0));
        assert!((f.whitening - expect).norm() < 1e-15);
    }

    #[test]
    fn degenerate_scale_rejected() {
        let mut g = iso(Vec3::zeros(), 0.5);
        g.log_scale.x = f64::NEG_INFINITY;
        assert!(matches!(whitening(&g), Err(Error::DegenerateScale(_))));
    }

    #[test]
    fn canonical_ray_examples() {
        let g = iso(Vec3::zeros(), 0.5);
        let f = whitening(&g).unwrap();
        let cr = canonical_ray(&f, &Ray::new(Vec3::new(0.0, 0.0, -5.0), Vec3::z()).unwrap());
        assert_eq!(cr.origin, Vec3::new(0.0, 0.0, -5.0));
        assert_eq!(cr.direction, Vec3::z());
        assert_eq!(cr.moment, Vec3::zeros());

        let g =
            Gaussian3D::from_natural(Vec3::x(), Vec3::new(2.0, 1.0, 0.5), [1.0, 0.0, 0.0, 0.0], 0.5, vec![[0.0; 3]]);
        let f = whitening(&g).unwrap();
        let cr = canonical_ray(&f, &Ray::new(Vec3::new(1.0, 0.0, -4.0), Vec3::z()).unwrap());
        assert!((cr.origin - Vec3::new(0.0, 0.0, -8.0)).norm() < 1e-14);
        assert!((cr.direction - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-14);
    }

    #[test]
    fn kappa_examples() {
        let cr = CanonicalRay::from_parts(Vec3::new(3.0, 4.0, 0.0), Vec3::z());
        assert_eq!(cr.moment, Vec3::new(4.0, -3.0, 0.0));
        assert_eq!(mahalanobis_sq(&cr).unwrap(), 25.0);
        let cr = CanonicalRay::from_parts(Vec3::new(1.0, 2.0, 3.0), Vec3::new(2.0, 4.0, 6.0));
        assert_eq!(mahalanobis_sq(&cr).unwrap(), 0.0);
        let cr = CanonicalRay::from_parts(Vec3::x(), Vec3::zeros());
        assert!(matches!(mahalanobis_sq(&cr), Err(Error::DegenerateDirection)));
    }

    #[test]
    fn transmittance_examples() {
        let g = iso(Vec3::zeros(), 0.8);
        let t = transmittance(&g, &Ray::new(Vec3::new(0.0, 0.0, -5.0), Vec3::z()).unwrap()).unwrap();
        assert!(close(t, 0.8, 1e-15));
        let g = iso(Vec3::zeros(), 1.0 - 1e-12);
        let t = transmittance(&g, &Ray::new(Vec3::new(2.0, 0.0, -5.0), Vec3::z()).unwrap()).unwrap();
        assert!(close(t, (-2.0f64).exp(), 1e-11));
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite(&[(0.5, [1.0, 0.0, 0.0])]), [0.5, 0.0, 0.0]);
        assert_eq!(composite(&[(0.5, [1.0, 0.0, 0.0]), (0.5, [0.0, 1.0, 0.0])]), [0.5, 0.25, 0.0]);
        assert_eq!(composite(&[]), [0.0; 3]);
    }

    #[test]
    fn composite_is_order_sensitive() {
        let a = (0.6, [1.0, 0.0, 0.0]);
        let b = (0.3, [0.0, 0.0, 1.0]);
        assert_ne!(composite(&[a, b]), composite(&[b, a]));
    }

    #[test]
    fn composite_stops_early() {
        let blend = composite_blend([(0.995, [1.0; 3]), (0.995, [1.0; 3]), (0.5, [1.0; 3])]);
        assert_eq!(blend.used, 1);
        assert!(blend.remaining >= MIN_REMAINING);
    }

    fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("non-zero", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
    }

    fn arb_vec() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-5.0f64..5.0).prop_map(Vec3::from)
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(q in arb_quat()) {
            let r = quat_to_rotation(q).unwrap();
            prop_assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn whitening_inverts_covariance(q in arb_quat(), ls in prop::array::uniform3(-3.0f64..3.0), mean in arb_vec()) {
            let g = Gaussian3D { mean, log_scale: Vec3::from(ls), rotation: q, opacity_logit: 0.0, sh: vec![[0.0; 3]] };
            let f = whitening(&g).unwrap();
            let sigma = g.covariance().unwrap();
            let prod = f.whitening * sigma * f.whitening.transpose();
            prop_assert!((prod - Mat3::identity()).norm() < 1e-6);
            let rs = g.rotation_matrix().unwrap() * Mat3::from_diagonal(&g.scale());
            prop_assert!((f.whitening * rs - Mat3::identity()).norm() < 1e-9);
        }

        #[test]
        fn moment_is_perpendicular(o in arb_vec(), d in arb_vec()) {
            let cr = CanonicalRay::from_parts(o, d);
            let scale = o.norm() * d.norm() * cr.moment.norm().max(1e-300);
            prop_assert!(cr.moment.dot(&o).abs() <= 1e-7 * scale.max(1e-300) + 1e-300);
            prop_assert!(cr.moment.dot(&d).abs() <= 1e-7 * scale.max(1e-300) + 1e-300);
        }

        #[test]
        fn transmittance_invariant_to_direction_scale(q in arb_quat(), mean in arb_vec(), o in arb_vec(), d in arb_vec(), k in 0.01f64..100.0) {
            prop_assume!(d.norm() > 1e-3);
            let g = Gaussian3D { mean, log_scale: Vec3::new(0.1, -0.3, 0.4), rotation: q, opacity_logit: 0.3, sh: vec![[0.0; 3]] };
            let a = transmittance(&g, &Ray::new(o, d).unwrap()).unwrap();
            let b = transmittance(&g, &Ray::new(o, d * k).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300) + 1e-300);
        }

        #[test]
        fn transmittance_invariant_to_rigid_motion(q in arb_quat(), qm in arb_quat(), mean in arb_vec(), o in arb_vec(), d in arb_vec(), shift in arb_vec()) {
            prop_assume!(d.norm() > 1e-3);
            let g = Gaussian3D { mean, log_scale: Vec3::new(0.2, -0.5, 0.1), rotation: q, opacity_logit: -0.2, sh: vec![[0.0; 3]] };
            let before = transmittance(&g, &Ray::new(o, d).unwrap()).unwrap();
            // Compose the motion's quaternion with the Gaussian's so the frame moves rigidly.
            let m = normalize_quaternion(qm).unwrap();
            let rm = quat_to_rotation(m).unwrap();
            let gq = normalize_quaternion(q).unwrap();
            let composed = [
                m[0] * gq[0] - m[1] * gq[1] - m[2] * gq[2] - m[3] * gq[3],
                m[0] * gq[1] + m[1] * gq[0] + m[2] * gq[3] - m[3] * gq[2],
                m[0] * gq[2] - m[1] * gq[3] + m[2] * gq[0] + m[3] * gq[1],
                m[0] * gq[3] + m[1] * gq[2] - m[2] * gq[1] + m[3] * gq[0],
            ];
            let moved = Gaussian3D { mean: rm * mean + shift, rotation: composed, ..g.clone() };
            let after = transmittance(&moved, &Ray::new(rm * o + shift, rm * d).unwrap()).unwrap();
            prop_assert!((before - after).abs() <= 1e-7 * before.max(1e-12) + 1e-15);
        }

        #[test]
        fn kappa_never_negative(o in arb_vec(), d in arb_vec(), squash in 1e-8f64..1.0) {
            prop_assume!(d.norm() > 1e-6);
            let cr = CanonicalRay::from_parts(o / squash, d / squash);
            prop_assert!(mahalanobis_sq(&cr).unwrap() >= 0.0);
        }

        #[test]
        fn composite_matches_direct_sum(ts in prop::collection::vec(0.0f64..0.5, 0..10), cs in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 10)) {
            let contribs: Vec<(f64, Rgb)> = ts.iter().zip(cs.iter()).map(|(t, c)| (*t, *c)).collect();
            let got = composite(&contribs);
            let mut want = [0.0; 3];
            for (i, (t, c)) in contribs.iter().enumerate() {
                let prefix: f64 = contribs[..i].iter().map(|(tj, _)| 1.0 - tj).product();
                for ch in 0..3 {
                    want[ch] += c[ch] * t * prefix;
                }
            }
            for ch in 0..3 {
                prop_assert!((got[ch] - want[ch]).abs() < 1e-12);
                let cmax = contribs.iter().map(|(_, c)| c[ch]).fold(0.0, f64::max);
                prop_assert!(got[ch] >= 0.0 && got[ch] <= cmax + 1e-15);
            }
        }
    }
}
