//! Runs every oracle suite at full size and prints the report.
//!
//! Pass `quick` for reduced case counts.

use gaussray::verify::{run, Suite, VerifyOptions};

fn main() -> gaussray::Result<()> {
    let opts = match std::env::args().nth(1).as_deref() {
        Some("quick") => VerifyOptions::quick(),
        _ => VerifyOptions::default(),
    };
    let reports = run(Suite::All, &opts)?;
    for r in &reports {
        print!("{r}");
    }
    if reports.iter().any(|r| !r.passed()) {
        std::process::exit(1);
    }
    Ok(())
}
