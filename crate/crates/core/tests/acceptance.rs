//! Runs every acceptance criterion and prints one verdict line per criterion.
//!
//! Set `VPTRAP_CRITERIA=algebra,kernel` to run a subset.

use std::process::ExitCode;

use vptrap::acceptance::{Lab, CRITERIA};
use vptrap::SimConfig;

fn main() -> ExitCode {
    let selected: Vec<String> = match std::env::var("VPTRAP_CRITERIA") {
        Ok(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        Err(_) => CRITERIA.iter().map(|s| s.to_string()).collect(),
    };
    let lab = Lab::new(SimConfig::default());
    let mut failed = 0;
    for name in &selected {
        match lab.run_criterion(name) {
            Ok(report) => {
                println!("{}", report.line());
                failed += usize::from(!report.passed());
            }
            Err(e) => {
                println!("FAIL {name}: {e}");
                failed += 1;
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", selected.len() - failed, selected.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
