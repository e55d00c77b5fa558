//! Run every randomized oracle and print one line per report.
//!
//! `cargo run --example verify_theorems -- 500` raises the trial count.

use esm::verify::{self, Suite};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let trials = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let reports = verify::run_suite(Suite::All, trials, 42, 4..=48)?;
    for r in &reports {
        println!("{}", r.summary());
    }
    if reports.iter().any(|r| !r.pass) {
        std::process::exit(1);
    }
    Ok(())
}
