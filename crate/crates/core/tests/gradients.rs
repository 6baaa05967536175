//! Finite-difference certification across every differentiable operation
//! and both attention blocks. Runs in f64 with h = 1e-5; instances that
//! land on tie points are resampled, not failed.

use l2sa_core::gradcheck::{grad_check, standard_fragments, GradCheckSettings};

#[test]
fn every_standard_fragment_passes_certification() {
    let settings = GradCheckSettings::default();
    assert_eq!(settings.instances, 20);
    let mut failures = Vec::new();
    for fragment in standard_fragments() {
        let report = grad_check(&fragment, &settings).expect("certification run");
        if !report.passed() {
            failures.push(report.text_table());
        }
    }
    assert!(failures.is_empty(), "fragments failed certification:\n{}", failures.join("\n"));
}

#[test]
fn dense_fragment_meets_linear_accuracy() {
    let fragment = standard_fragments().into_iter().find(|f| f.name == "dense").unwrap();
    let settings = GradCheckSettings { tolerance: 1e-6, ..Default::default() };
    let report = grad_check(&fragment, &settings).unwrap();
    assert!(report.passed(), "{}", report.text_table());
}
