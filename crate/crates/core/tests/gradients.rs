mod common;

use common::gradient::{self, CheckResult, TOLERANCE};

fn assert_all(results: Vec<CheckResult>) {
    let mut bad = Vec::new();
    for r in &results {
        assert!(r.probes > 0, "{} probed nothing", r.name);
        if !(r.worst < TOLERANCE) {
            bad.push(format!("{} worst {:.3e} at {}", r.name, r.worst, r.worst_at));
        }
    }
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn numeric_core_ops_match_finite_differences() {
    assert_all(gradient::numeric_core_checks());
}

#[test]
fn student_matches_finite_differences() {
    assert_all(gradient::student_checks());
}

#[test]
fn dcsd_loss_matches_finite_differences() {
    assert_all(vec![gradient::dcsd_check()]);
}

#[test]
fn semantic_weight_and_fusion_match_finite_differences() {
    assert_all(vec![gradient::semantic_weight_check(), gradient::fuse_check()]);
}

#[test]
fn mot_loss_matches_finite_differences() {
    assert_all(vec![gradient::mot_loss_check()]);
}

#[test]
fn full_objective_matches_finite_differences() {
    assert_all(vec![gradient::objective_check()]);
}
