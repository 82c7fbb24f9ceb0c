//! Writes the demo scene and cameras, then renders it with every camera
//! model and reports stage timings.
//!
//! cargo run --release --example render_demo -- [out_dir]

use std::path::PathBuf;

use gaussray::camera::{Camera, CameraJson, CameraModel, Intrinsics, Pose};
use gaussray::ply::save_ply;
use gaussray::render::{render, RenderOptions};
use gaussray::scene::demo_scene;

fn main() -> gaussray::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/demo".into()));
    std::fs::create_dir_all(&dir)?;
    let scene = demo_scene();
    save_ply(&scene, &dir.join("demo_scene.ply"))?;

    let (w, h) = (160, 80);
    let beap = Camera::beap(Pose::identity(), 240.0, 120.0, w, h)?;
    // equidistant fisheye over the same horizontal span
    let f = w as f64 / 240f64.to_radians();
    let intr = Intrinsics { fx: f, fy: f, cx: w as f64 / 2.0, cy: h as f64 / 2.0 };
    let kb = Camera::new(Pose::identity(), CameraModel::KbFisheye(intr, [0.0; 4]), w, h)?;
    let pinhole_f = (w as f64 / 2.0) / 60f64.to_radians().tan();
    let pin_intr = Intrinsics { fx: pinhole_f, fy: pinhole_f, cx: w as f64 / 2.0, cy: h as f64 / 2.0 };
    let pinhole = Camera::new(Pose::identity(), CameraModel::Pinhole(pin_intr), w, h)?;

    let opts = RenderOptions::default();
    for (name, cam) in [("beap", beap), ("kb", kb), ("pinhole", pinhole)] {
        cam.save_json(&dir.join(format!("{name}_camera.json")))?;
        let out = render(&scene, &cam, &opts)?;
        out.image.save(&dir.join(format!("demo_{name}.png")))?;
        let t = out.times;
        println!(
            "{name:<8} prep {:.2} ms  dup {:.2} ms  sort {:.2} ms  render {:.2} ms  total {:.2} ms",
            t.prep, t.dup, t.sort, t.render, t.total
        );
    }
    let json = CameraJson::from_camera(&beap);
    println!(
        "BEAP camera: {} x {} at {:.0} x {:.0} deg; files in {}",
        json.w,
        json.h,
        json.fovx_deg,
        json.fovy_deg,
        dir.display()
    );
    Ok(())
}
