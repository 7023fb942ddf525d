//! One pass/fail line per acceptance criterion. The desk-scale learning run
//! is skipped unless `POMPC_FULL=1` is set.
//!
//! Criterion 3 is a 3-sigma test repeated over 100 fixed pairs, so a correct
//! implementation still misses it for roughly one seed set in four. Its line
//! is printed as is; `kl_monte_carlo_is_calibrated` asserts the estimator
//! itself.

use pompc::verify::{kl_z_scores, run_suite, SuiteOptions};

#[test]
fn acceptance_suite() {
    let opts = SuiteOptions {
        full: std::env::var("POMPC_FULL").is_ok_and(|v| v == "1"),
        ..SuiteOptions::default()
    };
    let reports = run_suite(&opts);
    println!();
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<u32> = reports.iter().filter(|r| !r.passed() && r.id != 3).map(|r| r.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn kl_monte_carlo_is_calibrated() {
    let (zs, self_zero) = kl_z_scores(100, 200_000).unwrap();
    assert!(self_zero);
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<f64>() / n;
    let rms = (zs.iter().map(|z| z * z).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.3, "mean z {mean}");
    assert!((0.8..1.25).contains(&rms), "rms z {rms}");
    assert!(zs.iter().all(|z| z.abs() < 4.5));
}
