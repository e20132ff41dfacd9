mod support;

#[test]
fn block_gradients_match_finite_differences() {
    for (name, err, tol) in support::checks::gradient_suite(11, false) {
        assert!(err < tol, "{name}: relative error {err:e} (tolerance {tol:e})");
    }
}
