use std::time::Instant;

use sdpn_core::oracle::{run_suite, SuiteOptions};

#[test]
fn full_oracle_suite_passes() {
    let start = Instant::now();
    let report = run_suite(None, &SuiteOptions::default());
    for c in &report.cases {
        println!(
            "{:<34} {:>4} instances  max_dev {:.3e}  tol {:.1e}  {}",
            c.name,
            c.instances,
            c.max_deviation,
            c.tolerance,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    println!("suite took {:.1?}", start.elapsed());
    assert!(report.passed());
}
