use std::io::Write;
use std::sync::OnceLock;

use h5sim_core::acceptance::{self, Case2Runs, CriterionResult};

fn report(r: CriterionResult) {
    // Straight to stderr so the line shows even when output is captured.
    let _ = writeln!(std::io::stderr(), "{r}");
    assert!(r.passed, "criterion {} failed", r.id);
}

fn case2() -> &'static Case2Runs {
    static RUNS: OnceLock<Case2Runs> = OnceLock::new();
    RUNS.get_or_init(acceptance::case2_runs)
}

#[test]
fn criterion_1_prediction_collapse() {
    report(acceptance::prediction_collapse());
}

#[test]
fn criterion_2_mpc_argmin() {
    report(acceptance::mpc_argmin());
}

#[test]
fn criterion_3_integrator_oracle() {
    report(acceptance::integrator_oracle());
}

#[test]
fn criterion_4_case1_tracking() {
    report(acceptance::case1_tracking());
}

#[test]
fn criterion_5_case2_leakage() {
    report(acceptance::case2_leakage(case2()));
}

#[test]
fn criterion_6_case3_fault() {
    report(acceptance::case3_fault());
}

#[test]
fn criterion_7_mppt_properties() {
    report(acceptance::mppt_properties());
}

#[test]
fn criterion_8_switching_count() {
    report(acceptance::case2_switching(case2()));
}
