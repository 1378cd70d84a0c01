use hetcp_core::pipeline::gradsuite::{e2e_check, op_checks, E2E_TOL, OP_TOL};

#[test]
fn every_op_matches_central_differences() {
    let checks = op_checks(7).unwrap();
    assert!(checks.len() >= 30);
    for c in &checks {
        assert!(c.max_rel_error < OP_TOL, "{}: {}", c.op, c.max_rel_error);
    }
}

#[test]
fn stage2_forward_matches_central_differences() {
    let r = e2e_check(1, 4).unwrap();
    eprintln!("{r:?}");
    assert!(r.probed > 20);
    assert!(r.f64_max_rel_error < E2E_TOL, "{r:?}");
    assert!(r.f32_norm_rel_error < E2E_TOL, "{r:?}");
}
