//! Central finite differences.

/// Central difference of a scalar function at `x`.
pub fn central_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference gradient of `f` at `x` with one step size for every coordinate.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central difference with one Richardson extrapolation step (`h` and `h/2`),
/// accurate to fourth order.
pub fn richardson_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    let coarse = central_diff(&mut f, x, h);
    let fine = central_diff(&mut f, x, 0.5 * h);
    (4.0 * fine - coarse) / 3.0
}

/// Richardson-extrapolated gradient with a per-coordinate step.
pub fn richardson_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], steps: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), steps.len());
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            richardson_diff(
                |v| {
                    p[i] = v;
                    let r = f(&p);
                    p[i] = x[i];
                    r
                },
                x[i],
                steps[i],
            )
        })
        .collect()
}
