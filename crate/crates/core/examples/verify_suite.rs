//! Runs the full oracle suite and prints one line per check.

use std::time::Instant;

use wdlab::verify;

fn main() -> wdlab::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let start = Instant::now();
    let reports = verify::run_all(seed, verify::DEFAULT_TRIALS, None)?;
    for r in &reports {
        println!(
            "{:<24} {} trials  max err {:.3e}  tol {:.0e}  {}",
            r.name,
            r.trials,
            r.max_rel_error,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
