//! Per-pixel solid-angle dispersion of BEAP, pinhole and equidistant
//! fisheye grids at equal field of view and resolution.
//!
//! cargo run --release --example ray_uniformity

use gaussray::camera::{solid_angle_dispersion, Camera, CameraModel, Intrinsics, Pose};

fn main() -> gaussray::Result<()> {
    let n = 128;
    println!("{:>8} {:>10} {:>10} {:>10}", "fov_deg", "beap", "pinhole", "fisheye");
    for fov in [60.0, 90.0, 120.0, 150.0] {
        let half = (fov / 2.0f64).to_radians();
        let c = n as f64 / 2.0;
        let beap = Camera::beap(Pose::identity(), fov, fov, n, n)?;
        let pf = c / half.tan();
        let pinhole =
            Camera::new(Pose::identity(), CameraModel::Pinhole(Intrinsics { fx: pf, fy: pf, cx: c, cy: c }), n, n)?;
        let ff = c / half;
        let fisheye = Camera::new(
            Pose::identity(),
            CameraModel::KbFisheye(Intrinsics { fx: ff, fy: ff, cx: c, cy: c }, [0.0; 4]),
            n,
            n,
        )?;
        println!(
            "{fov:>8.0} {:>10.4} {:>10.4} {:>10.4}",
            solid_angle_dispersion(&beap)?,
            solid_angle_dispersion(&pinhole)?,
            solid_angle_dispersion(&fisheye)?
        );
    }
    Ok(())
}
