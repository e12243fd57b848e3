//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Pass criterion ids as arguments to run a subset.

use std::process::ExitCode;
use std::time::Instant;

use cellfree::harness::acceptance::{run_criterion, CRITERIA};

fn main() -> ExitCode {
    let chosen: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ids: Vec<usize> = CRITERIA.iter().map(|c| c.0).filter(|id| chosen.is_empty() || chosen.contains(id)).collect();
    let mut failed = 0;
    for id in &ids {
        let t = Instant::now();
        let r = run_criterion(*id);
        println!("{r} [{:.1}s]", t.elapsed().as_secs_f64());
        if !r.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", ids.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
