//! Runs every acceptance criterion and prints one line per criterion.
//!
//! `SPDE_LAB_ACCEPTANCE=3,7` restricts the run to the listed criteria.

use spde_lab::acceptance::{run_criterion, CRITERIA};

const SEED: u64 = 20_240_601;

fn main() {
    let only: Option<Vec<u8>> = std::env::var("SPDE_LAB_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, _) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = run_criterion(id, SEED);
        println!("{}", outcome.line());
        if !outcome.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
