#[path = "support/gradsuite.rs"]
mod gradsuite;

use gradsuite::{op_reports, supernet_report, END_TO_END_TOL, OP_TOL};

#[test]
fn every_op_matches_central_differences() {
    let reports = op_reports();
    assert!(reports.len() >= 30);
    for (name, r) in &reports {
        assert!(r.checked > 0, "{name} probed nothing");
        assert!(r.max_rel_err <= OP_TOL, "{name}: {} at {}", r.max_rel_err, r.worst);
    }
}

#[test]
fn supernet_loss_matches_central_differences() {
    let r = supernet_report();
    assert!(r.checked > 100, "{}", r.checked);
    assert!(r.max_rel_err <= END_TO_END_TOL, "{} at {}", r.max_rel_err, r.worst);
}
