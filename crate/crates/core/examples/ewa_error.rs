//! Monte Carlo error of the local-affine splat for one Gaussian swept from
//! the optical axis to 70 degrees off-axis.
//!
//! cargo run --release --example ewa_error -- [samples]

use gaussray::verify::{ewa_sweep, EWA_ANGLES_DEG};

fn main() -> gaussray::Result<()> {
    let samples = std::env::args().nth(1).map_or(200_000, |s| s.parse().expect("sample count"));
    println!("{:>8} {:>10} {:>10}", "angle", "error", "ci95");
    for (a, e) in EWA_ANGLES_DEG.iter().zip(ewa_sweep(samples, 42)?) {
        println!("{a:>8.1} {:>10.5} {:>10.5}", e.error, 1.96 * e.std_error);
    }
    Ok(())
}
