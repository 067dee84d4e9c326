//! Randomized oracle suites: the analytic kernel-expectation statistics
//! against Gauss-Hermite quadrature, and the closed-form KL divergences
//! against the dense generic formula.

use hetgp::oracles::{
    kl_closed_forms_vs_dense, psi_deterministic_collapse_max_error, psi_statistics_vs_quadrature,
};

#[test]
fn psi_statistics_match_quadrature_to_1e6_relative() {
    let outcome = psi_statistics_vs_quadrature(100, 2024);
    assert!(
        outcome.max_abs_psi0 < 1e-6,
        "psi0 error {}",
        outcome.max_abs_psi0
    );
    assert!(
        outcome.max_rel_psi1 < 1e-6,
        "psi1 relative error {}",
        outcome.max_rel_psi1
    );
    assert!(
        outcome.max_rel_psi2 < 1e-6,
        "psi2 relative error {}",
        outcome.max_rel_psi2
    );
}

#[test]
fn psi_statistics_collapse_deterministically_to_1e10() {
    let worst = psi_deterministic_collapse_max_error(100, 7);
    assert!(worst < 1e-10, "collapse error {worst}");
}

#[test]
fn kl_closed_forms_match_dense_reference_to_1e10() {
    let outcome = kl_closed_forms_vs_dense(100, 31);
    assert!(
        outcome.max_err_standard < 1e-10,
        "standard-normal KL error {}",
        outcome.max_err_standard
    );
    assert!(
        outcome.max_err_diag < 1e-10,
        "diagonal KL error {}",
        outcome.max_err_diag
    );
    assert!(outcome.min_value >= -1e-12, "negative KL {}", outcome.min_value);
}
