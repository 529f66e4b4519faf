mod support;

use support::Outcome;

fn check(outcome: Outcome) {
    println!("{}", outcome.detail);
    assert!(outcome.passed, "{}", outcome.detail);
}

#[test]
fn auroc_trapezoid_equals_pair_counting() {
    check(support::auroc_matches_mann_whitney());
}

#[test]
fn analytic_gradients_match_finite_differences() {
    check(support::gradients_match_finite_differences());
}

#[test]
fn relative_information_is_reparameterization_invariant() {
    check(support::relative_information_invariance());
}

#[test]
fn expected_information_matches_enumeration() {
    check(support::entropy_decomposition());
}

#[test]
fn dbscan_matches_closure_oracle_under_shuffles() {
    check(support::dbscan_matches_oracle());
}

#[test]
fn scoring_sanity_properties() {
    check(support::scoring_sanity());
}
