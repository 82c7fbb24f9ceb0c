//! Fits a perturbed copy of a random scene to eight rendered BEAP views.
//!
//! cargo run --release --example fit_synthetic -- [iterations]

use gaussray::train::{synthetic_problem, train, SyntheticSpec, TrainConfig};

fn main() -> gaussray::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let iterations = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("iteration count"));
    let config = TrainConfig { iterations, ..Default::default() };
    let problem = synthetic_problem(&SyntheticSpec::default(), &config)?;
    let (_, log) = train(problem.init, problem.views, config)?;
    let (first, last) = (log.first().unwrap(), log.last().unwrap());
    println!("initial psnr {:.2} dB, final psnr {:.2} dB after {} iterations", first.psnr, last.psnr, last.iter);
    Ok(())
}
