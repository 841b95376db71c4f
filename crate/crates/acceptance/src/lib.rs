//! Verdict lines for the acceptance suite.
//!
//! Lines go straight to the process's stderr so they show up even when the
//! test harness captures output of passing tests.

use std::io::Write;
use std::time::Duration;

pub fn verdict_line(id: &str, title: &str, passed: bool, detail: &str, elapsed: Duration) -> String {
    format!(
        "ACCEPTANCE {id} {} {title}: {detail} [{:.1}s]",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    )
}

/// Prints the verdict line and returns `passed`.
pub fn verdict(id: &str, title: &str, passed: bool, detail: &str, elapsed: Duration) -> bool {
    let line = verdict_line(id, title, passed, detail, elapsed) + "\n";
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
    passed
}
