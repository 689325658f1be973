use dpsynth::audits::{audit_accountant, default_accountant_grid, epsilon_by_quadrature, run_audits, AccountantCase};

#[test]
fn accountant_audit_on_default_grid() {
    let r = audit_accountant(&default_accountant_grid()).unwrap();
    assert!(r.passed, "{}", r.witness["worst_relative_gap"]);
}

#[test]
fn full_sampling_single_step_near_5_30() {
    let eps = epsilon_by_quadrature(&AccountantCase { q: 1.0, sigma: 1.0, steps: 1, delta: 1e-5 });
    assert!((eps - 5.30).abs() < 0.01, "{eps}");
}

#[test]
fn all_audits_pass_and_serialize() {
    let reports = run_audits(None).unwrap();
    assert_eq!(reports.len(), 3);
    for r in &reports {
        assert!(r.passed, "{} failed: {}", r.id, r.witness);
        let text = serde_json::to_string(r).unwrap();
        assert!(text.contains(&r.id));
    }
}

#[test]
fn quadrature_matches_closed_form_at_small_rate() {
    let closed = dpsynth::accountant::rdp_subsampled_gaussian(0.01, 1.0, 8).unwrap();
    let quad = dpsynth::audits::rdp_quadrature(0.01, 1.0, 8);
    assert!(((closed - quad) / quad).abs() < 1e-6, "{closed} vs {quad}");
}
