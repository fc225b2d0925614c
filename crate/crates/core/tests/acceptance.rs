//! The nine acceptance criteria at their stated tolerances. Criteria run one
//! at a time so that each is timed against its budget without contention.

use std::sync::Mutex;

use qpsde::acceptance::{CriterionRegistry, SuiteContext};

static SERIAL: Mutex<()> = Mutex::new(());

fn criterion(id: u32) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let ctx = SuiteContext::default_experiment().unwrap();
    let report = CriterionRegistry::standard().run(&ctx, &[id]).unwrap();
    let r = &report.criteria[0];
    println!("{}", r.summary());
    assert!(r.passed, "criterion {id} failed");
}

#[test]
fn criterion_1_exact_pathwise_identities() {
    criterion(1);
}

#[test]
fn criterion_2_contraction_rate() {
    criterion(2);
}

#[test]
fn criterion_3_pullback_convergence() {
    criterion(3);
}

#[test]
fn criterion_4_ou_law() {
    criterion(4);
}

#[test]
fn criterion_5_entrance_property() {
    criterion(5);
}

#[test]
fn criterion_6_quasi_periodicity() {
    criterion(6);
}

#[test]
fn criterion_7_invariant_measure() {
    criterion(7);
}

#[test]
fn criterion_8_fokker_planck() {
    criterion(8);
}

#[test]
fn criterion_9_condition_audits() {
    criterion(9);
}
