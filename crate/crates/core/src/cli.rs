//! Command-line front end: render, train, eval, verify, convert.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::camera::{
    central_region_mask, covering_beap, load_camera_list, resample, resample_to_beap, Camera, CameraJson,
};
use crate::error::{Error, Result};
use crate::math::{Gaussian3D, Rgb};
use crate::metrics::{psnr, ssim};
use crate::ply::{load_ply, save_ply};
use crate::raster::Image;
use crate::render::{render, render_reference, PreparedFrame, RenderOptions, StageTimes};
use crate::sh;
use crate::train::{MetricRow, TrainConfig, Trainer, View};
use crate::verify::{self, Suite, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "GEER_THREADS";

#[derive(Parser, Debug)]
#[command(name = "gaussray", version, about = "Ray-based Gaussian scene renderer and trainer")]
pub struct Cli {
    /// Worker threads (default: all cores). GEER_THREADS overrides.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for randomized commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a scene into an image plus a stats JSON.
    Render(RenderArgs),
    /// Optimize a scene against posed images.
    Train(TrainArgs),
    /// Report PSNR and SSIM of a scene against posed images.
    Eval(EvalArgs),
    /// Run the oracle property suites.
    Verify(VerifyArgs),
    /// Convert images between formats and cameras, or rewrite a scene.
    Convert(ConvertArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Beap,
    Pinhole,
    Kb,
}

impl ModelArg {
    fn name(self) -> &'static str {
        match self {
            Self::Beap => "beap",
            Self::Pinhole => "pinhole",
            Self::Kb => "kb",
        }
    }
}

#[derive(Args, Debug)]
pub struct RenderOpts {
    /// Support cutoff in standard deviations.
    #[arg(long, default_value_t = 3.0)]
    pub lambda: f64,
    /// Background color as r,g,b in [0, 1].
    #[arg(long, default_value = "0,0,0", value_parser = parse_rgb)]
    pub bg: Rgb,
    /// Tile edge in pixels.
    #[arg(long, default_value_t = 16)]
    pub tile: usize,
}

impl RenderOpts {
    fn options(&self) -> RenderOptions {
        RenderOptions { lambda: self.lambda, tile_size: self.tile, background: self.bg, cutoff: true }
    }
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Camera JSON; a list uses its first entry.
    #[arg(long)]
    pub camera: PathBuf,
    /// Output image (.png or .pfm).
    #[arg(long)]
    pub out: PathBuf,
    /// Render with this model instead of the one named in the camera file.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[command(flatten)]
    pub render: RenderOpts,
    /// Stats JSON path (default: the output path with a .json extension).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Use the exhaustive all-pairs renderer.
    #[arg(long)]
    pub reference: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory holding the images named in the camera list.
    #[arg(long)]
    pub images: PathBuf,
    /// Camera list JSON with an `image` field per entry.
    #[arg(long)]
    pub cameras: PathBuf,
    /// Initial scene PLY.
    #[arg(long)]
    pub init: PathBuf,
    /// Training config JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint.ply and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Central,
    Peripheral,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    /// Restrict metrics to the central or peripheral angular region.
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    /// CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub render: RenderOpts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    All,
    Transmittance,
    Gradients,
    Association,
    Ewa,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
    /// Reduced case counts.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, hide = true)]
    pub flip_cross_term: bool,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Input image (.png, .pfm) or scene (.ply).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Camera of the input image, for resampling.
    #[arg(long, requires = "to_camera")]
    pub from_camera: Option<PathBuf>,
    /// Camera to resample the image into.
    #[arg(long, requires = "from_camera")]
    pub to_camera: Option<PathBuf>,
    /// Truncate or zero-pad scene SH to this degree.
    #[arg(long)]
    pub sh_degree: Option<usize>,
}

fn parse_rgb(s: &str) -> std::result::Result<Rgb, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| e.to_string())?;
    match parts[..] {
        [r, g, b] if parts.iter().all(|v| (0.0..=1.0).contains(v)) => Ok([r, g, b]),
        _ => Err("expected three comma-separated values in [0, 1]".into()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_BAD_INPUT } else { EXIT_OK };
        }
    };
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).or(cli.threads);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_INTERNAL;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Maps an error to the documented exit codes: 2 for bad input, 3 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Image(_)
        | Error::InvalidCamera(_)
        | Error::InvalidConfig(_)
        | Error::ShapeMismatch(_)
        | Error::UnsupportedShDegree(_)
        | Error::DegenerateRotation
        | Error::DegenerateScale(_) => EXIT_BAD_INPUT,
        _ => EXIT_INTERNAL,
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let seed = cli.seed;
    match &cli.command {
        Command::Render(a) => cmd_render(a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(a, seed),
        Command::Eval(a) => cmd_eval(a).map(|_| EXIT_OK),
        Command::Verify(a) => cmd_verify(a, seed),
        Command::Convert(a) => cmd_convert(a).map(|_| EXIT_OK),
    }
}

fn first_camera(path: &Path, model: Option<ModelArg>) -> Result<Camera> {
    let mut json = load_camera_list(path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Parse { path: path.to_path_buf(), msg: "no camera in file".into() })?;
    if let Some(m) = model {
        json.model = m.name().into();
    }
    json.to_camera()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderStats {
    pub width: usize,
    pub height: usize,
    pub model: String,
    pub gaussians: usize,
    /// Tile-Gaussian pairs after association; absent for the exhaustive renderer.
    pub pairs: Option<usize>,
    pub renderer: String,
    /// Stage wall times in milliseconds.
    pub times_ms: StageTimes,
}

pub fn cmd_render(a: &RenderArgs) -> Result<RenderStats> {
    let scene = load_ply(&a.scene)?;
    let camera = first_camera(&a.camera, a.model)?;
    let opts = a.render.options();
    let t0 = Instant::now();
    let (mut out, pairs) = if a.reference {
        let mut out = render_reference(&scene, &camera, &opts)?;
        out.times.render = t0.elapsed().as_secs_f64() * 1e3;
        (out, None)
    } else {
        let frame = PreparedFrame::new(&scene, &camera, &opts)?;
        let out = frame.forward();
        (out, Some(frame.graph().gaussians.len()))
    };
    out.times.total = t0.elapsed().as_secs_f64() * 1e3;
    out.image.save(&a.out)?;
    let stats = RenderStats {
        width: camera.width,
        height: camera.height,
        model: CameraJson::from_camera(&camera).model,
        gaussians: scene.len(),
        pairs,
        renderer: if a.reference { "exhaustive" } else { "tiled" }.into(),
        times_ms: out.times,
    };
    let stats_path = a.stats.clone().unwrap_or_else(|| a.out.with_extension("json"));
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)?;
    println!("wrote {} ({}x{}, {:.2} ms)", a.out.display(), camera.width, camera.height, stats.times_ms.total);
    Ok(stats)
}

/// Posed images: camera list entries joined with files in `dir`. Every
/// image in the directory needs a camera and every camera an image.
pub fn load_posed_images(dir: &Path, cameras: &Path) -> Result<Vec<(String, CameraJson, Image)>> {
    let mut by_name: BTreeMap<String, CameraJson> = BTreeMap::new();
    for c in load_camera_list(cameras)? {
        let name = c.image.clone().ok_or_else(|| Error::Parse {
            path: cameras.to_path_buf(),
            msg: "camera entry without an `image` field".into(),
        })?;
        by_name.insert(name, c);
    }
    let mut files: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "pfm")) {
            files.push(path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
        }
    }
    files.sort();
    for f in &files {
        if !by_name.contains_key(f) {
            return Err(Error::InvalidConfig(format!("image {f} has no camera in {}", cameras.display())));
        }
    }
    by_name
        .into_iter()
        .map(|(name, cam)| {
            let path = dir.join(&name);
            if !path.exists() {
                return Err(Error::InvalidConfig(format!("camera for {name} but no such image in {}", dir.display())));
            }
            let img = Image::load(&path)?;
            Ok((name, cam, img))
        })
        .collect()
}

/// Training view: the target resampled into a BEAP grid covering the
/// source camera. Uncovered pixels are masked.
pub fn beap_view(camera: &Camera, image: &Image) -> Result<View> {
    let beap = covering_beap(camera)?;
    let target = if camera.is_beap() { image.clone() } else { resample_to_beap(image, camera, &beap)? };
    Ok(View { camera: beap, target })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct TrainState {
    iteration: usize,
}

pub fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<i32> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::Parse { path: p.clone(), msg: format!("line {}: {e}", e.line()) })?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let posed = load_posed_images(&a.images, &a.cameras)?;
    if posed.is_empty() {
        return Err(Error::InvalidConfig("no training images".into()));
    }
    let mut views = Vec::new();
    for (name, json, img) in &posed {
        let view = beap_view(&json.to_camera()?, img)?;
        let masked = 1.0 - view.target.valid_count() as f64 / view.target.len() as f64;
        log::info!("{name}: {:.1}% of BEAP pixels masked", 100.0 * masked);
        views.push(view);
    }
    std::fs::create_dir_all(&a.out)?;
    let checkpoint = a.out.join("checkpoint.ply");
    let state_path = a.out.join("state.json");
    let csv_path = a.out.join("metrics.csv");
    let (init, start) = if a.resume {
        let state: TrainState = serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
        (load_ply(&checkpoint)?, state.iteration)
    } else {
        (load_ply(&a.init)?, 0)
    };

    let mut trainer = Trainer::new(init, views, config)?;
    trainer.resume_at(start);
    let file = OpenOptions::new().create(true).append(a.resume).write(true).truncate(!a.resume).open(&csv_path)?;
    let mut csv = csv::WriterBuilder::new().has_headers(!a.resume).from_writer(file);
    let result = trainer.run_with(|t, row: &MetricRow| {
        csv.serialize(row).map_err(csv_error)?;
        csv.flush()?;
        save_ply(t.scene(), &checkpoint)?;
        std::fs::write(&state_path, serde_json::to_string(&TrainState { iteration: t.iteration() })?)?;
        Ok(())
    });
    match result {
        Ok(log) => {
            if let Some(last) = log.last() {
                println!("iter {} loss {:.5} psnr {:.2} dB ssim {:.4}", last.iter, last.loss, last.psnr, last.ssim);
            }
            Ok(EXIT_OK)
        }
        Err(e @ Error::NonFiniteLoss { .. }) => {
            let dump = a.out.join("nonfinite_dump.ply");
            // scenes with non-finite parameters still serialize as f32
            save_ply(trainer.scene(), &dump)?;
            let bad = trainer.scene().iter().filter(|g| !gaussian_is_finite(g)).count();
            eprintln!("{e}; {bad} Gaussians with non-finite parameters; scene dumped to {}", dump.display());
            Ok(EXIT_INTERNAL)
        }
        Err(e) => Err(e),
    }
}

fn gaussian_is_finite(g: &Gaussian3D) -> bool {
    g.mean.iter().chain(g.log_scale.iter()).chain(g.rotation.iter()).chain(g.sh.iter().flatten()).all(|v| v.is_finite())
        && g.opacity_logit.is_finite()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub view: String,
    pub pixels: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Rounds a render to the precision its target was stored with, so an
/// image compared against its own saved render scores exactly.
fn quantize_like(img: &mut Image, target_path: &Path) {
    let png = !matches!(target_path.extension().and_then(|e| e.to_str()), Some("pfm"));
    for p in &mut img.pixels {
        for v in p.iter_mut() {
            *v = if png { (v.clamp(0.0, 1.0) * 255.0).round() / 255.0 } else { *v as f32 as f64 };
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<EvalRow>> {
    let scene = load_ply(&a.scene)?;
    let opts = a.render.options();
    let mut rows = Vec::new();
    for (name, json, mut target) in load_posed_images(&a.images, &a.cameras)? {
        let camera = json.to_camera()?;
        target.same_shape(&Image::new(camera.width, camera.height, [0.0; 3]))?;
        let mut img = render(&scene, &camera, &opts)?.image;
        quantize_like(&mut img, &a.images.join(&name));
        if let Some(split) = a.split {
            let central = central_region_mask(&camera, json.fx, json.fy)?;
            for (m, c) in target.mask.iter_mut().zip(central) {
                *m &= c == (split == Split::Central);
            }
        }
        let pixels = target.valid_count();
        rows.push(EvalRow { view: name, pixels, psnr: psnr(&img, &target)?, ssim: ssim(&img, &target)? });
    }
    let n = rows.len().max(1) as f64;
    let mean = EvalRow {
        view: "mean".into(),
        pixels: rows.iter().map(|r| r.pixels).sum(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    println!("{:<24} {:>8} {:>10} {:>8}", "view", "pixels", "psnr", "ssim");
    for r in rows.iter().chain(std::iter::once(&mean)) {
        println!("{:<24} {:>8} {:>10.3} {:>8.4}", r.view, r.pixels, r.psnr, r.ssim);
    }
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_path(out).map_err(csv_error)?;
        for r in rows.iter().chain(std::iter::once(&mean)) {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
    }
    rows.push(mean);
    Ok(rows)
}

pub fn cmd_verify(a: &VerifyArgs, seed: Option<u64>) -> Result<i32> {
    let suite = match a.suite {
        SuiteArg::All => Suite::All,
        SuiteArg::Transmittance => Suite::Transmittance,
        SuiteArg::Gradients => Suite::Gradients,
        SuiteArg::Association => Suite::Association,
        SuiteArg::Ewa => Suite::Ewa,
    };
    let mut opts = if a.quick { VerifyOptions::quick() } else { VerifyOptions::default() };
    opts.flip_cross_term = a.flip_cross_term;
    if let Some(s) = seed {
        opts.seed = s;
    }
    let reports = verify::run(suite, &opts)?;
    for r in &reports {
        print!("{r}");
    }
    Ok(if reports.iter().all(|r| r.passed()) { EXIT_OK } else { EXIT_FAILED })
}

fn resize_sh(g: &mut Gaussian3D, degree: usize) -> Result<()> {
    if degree > sh::MAX_DEGREE {
        return Err(Error::UnsupportedShDegree(degree));
    }
    g.sh.resize((degree + 1) * (degree + 1), [0.0; 3]);
    Ok(())
}

pub fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let is_ply = |p: &Path| p.extension().and_then(|e| e.to_str()) == Some("ply");
    if is_ply(&a.input) {
        if !is_ply(&a.output) {
            return Err(Error::InvalidConfig("a scene converts only to .ply".into()));
        }
        let mut scene = load_ply(&a.input)?;
        if let Some(d) = a.sh_degree {
            for g in &mut scene {
                resize_sh(g, d)?;
            }
        }
        save_ply(&scene, &a.output)?;
        println!("wrote {} ({} Gaussians)", a.output.display(), scene.len());
        return Ok(());
    }
    let img = Image::load(&a.input)?;
    let out = match (&a.from_camera, &a.to_camera) {
        (Some(src), Some(dst)) => resample(&img, &first_camera(src, None)?, &first_camera(dst, None)?)?,
        _ => img,
    };
    out.save(&a.output)?;
    println!("wrote {} ({}x{})", a.output.display(), out.width, out.height);
    Ok(())
}
