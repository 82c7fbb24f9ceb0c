//! Transmittance by direct numerical integration of the world-space density.
//!
//! The density is written out from the covariance itself (no whitening, no
//! moment vector) and integrated along the ray in the arc length of the
//! Gaussian's canonical frame, where the peak has unit width. Two unrelated
//! adaptive rules are provided so the oracle can check itself.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::math::{Gaussian3D, Ray, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
    /// Integration half-width in canonical standard deviations.
    pub half_width: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { abs_tol: 1e-15, rel_tol: 1e-12, max_subdivisions: 20_000, half_width: 12.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    GaussKronrod,
    Simpson,
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let pair = f(c - x) + f(c + x);
        kron += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive Gauss–Kronrod (7/15) integration.
pub fn integrate_gk<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<f64> {
    let (value, err) = gk15(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Piece { a, b, value, err });
    let (mut total, mut total_err) = (value, err);
    let mut pieces = 1;
    while total_err > spec.abs_tol.max(spec.rel_tol * total.abs()) {
        if pieces >= spec.max_subdivisions {
            return Err(Error::Quadrature { residual: total_err });
        }
        let worst = heap.pop().expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        let (lv, le) = gk15(&f, worst.a, mid);
        let (rv, re) = gk15(&f, mid, worst.b);
        total += lv + rv - worst.value;
        total_err += le + re - worst.err;
        heap.push(Piece { a: worst.a, b: mid, value: lv, err: le });
        heap.push(Piece { a: mid, b: worst.b, value: rv, err: re });
        pieces += 1;
    }
    // re-sum to shed the drift of incremental updates
    Ok(heap.iter().map(|p| p.value).sum())
}

/// Recursive adaptive Simpson integration with Richardson correction.
pub fn integrate_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<f64> {
    struct Ctx<'a, F> {
        f: &'a F,
        pieces: usize,
        max: usize,
        worst: f64,
    }
    fn recurse<F: Fn(f64) -> f64>(
        ctx: &mut Ctx<F>,
        (a, fa): (f64, f64),
        (m, fm): (f64, f64),
        (b, fb): (f64, f64),
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = (ctx.f)(lm);
        let frm = (ctx.f)(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if diff.abs() <= 15.0 * tol || depth == 0 || ctx.pieces >= ctx.max {
            if diff.abs() > 15.0 * tol {
                ctx.worst = ctx.worst.max(diff.abs() / 15.0);
            }
            return left + right + diff / 15.0;
        }
        ctx.pieces += 1;
        recurse(ctx, (a, fa), (lm, flm), (m, fm), left, 0.5 * tol, depth - 1)
            + recurse(ctx, (m, fm), (rm, frm), (b, fb), right, 0.5 * tol, depth - 1)
    }

    // split into a fixed number of panels first so narrow peaks cannot hide
    // between the three initial samples
    let panels = 64;
    let width = (b - a) / panels as f64;
    let mut ctx = Ctx { f: &f, pieces: panels, max: spec.max_subdivisions * 8, worst: 0.0 };
    let coarse: Vec<(f64, f64, f64, f64, f64, f64)> = (0..panels)
        .map(|k| {
            let lo = a + width * k as f64;
            let hi = if k + 1 == panels { b } else { lo + width };
            let mid = 0.5 * (lo + hi);
            (lo, f(lo), mid, f(mid), hi, f(hi))
        })
        .collect();
    let rough: f64 = coarse.iter().map(|(lo, fl, _, fm, hi, fh)| (hi - lo) / 6.0 * (fl + 4.0 * fm + fh)).sum();
    let tol = spec.abs_tol.max(spec.rel_tol * rough.abs()) / panels as f64;
    let mut total = 0.0;
    for (lo, fl, mid, fm, hi, fh) in coarse {
        let whole = (hi - lo) / 6.0 * (fl + 4.0 * fm + fh);
        total += recurse(&mut ctx, (lo, fl), (mid, fm), (hi, fh), whole, tol, 40);
    }
    if ctx.worst > spec.abs_tol.max(spec.rel_tol * total.abs()) {
        return Err(Error::Quadrature { residual: ctx.worst });
    }
    Ok(total)
}

/// Rotates `v` by the unit quaternion `(r, u)` as `q v q*`.
fn rotate(q: [f64; 4], v: Vec3) -> Vec3 {
    let r = q[0];
    let u = Vec3::new(q[1], q[2], q[3]);
    let t = 2.0 * u.cross(&v);
    v + r * t + u.cross(&t)
}

/// Principal axes scaled by inverse standard deviation, so the quadratic
/// form is a sum of squared projections. Forming the precision matrix instead
/// loses accuracy for strongly anisotropic Gaussians.
fn scaled_axes(g: &Gaussian3D) -> Result<[Vec3; 3]> {
    let n = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::DegenerateRotation);
    }
    let q = g.rotation.map(|v| v / n);
    Ok(std::array::from_fn(|k| {
        let mut e = Vec3::zeros();
        e[k] = 1.0;
        rotate(q, e) / g.log_scale[k].exp()
    }))
}

fn quad_form(axes: &[Vec3; 3], x: &Vec3, y: &Vec3) -> f64 {
    axes.iter().map(|a| a.dot(x) * a.dot(y)).sum()
}

/// Opacity-weighted density integral along the ray, by numerical quadrature.
pub fn transmittance_quadrature(g: &Gaussian3D, ray: &Ray, spec: &QuadratureSpec) -> Result<f64> {
    transmittance_quadrature_with(g, ray, spec, Rule::GaussKronrod)
}

pub fn transmittance_quadrature_with(g: &Gaussian3D, ray: &Ray, spec: &QuadratureSpec, rule: Rule) -> Result<f64> {
    let axes = scaled_axes(g)?;
    let opacity = 1.0 / (1.0 + (-g.opacity_logit).exp());
    let d = ray.direction;
    let rel = ray.origin - g.mean;
    let a = quad_form(&axes, &d, &d);
    if !(a > 0.0) {
        return Err(Error::DegenerateDirection);
    }
    let t_peak = -quad_form(&axes, &d, &rel) / a;
    let stretch = a.sqrt();
    let norm = opacity / (2.0 * std::f64::consts::PI).sqrt();
    let density = |u: f64| {
        let x = rel + d * (t_peak + u / stretch);
        norm * (-0.5 * quad_form(&axes, &x, &x)).exp()
    };
    let w = spec.half_width;
    match rule {
        Rule::GaussKronrod => integrate_gk(density, -w, w, spec),
        Rule::Simpson => integrate_simpson(density, -w, w, spec),
    }
}
