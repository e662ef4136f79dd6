mod common;

use common::gradient_suite;

#[test]
fn every_op_matches_finite_differences() {
    let results = gradient_suite();
    assert_eq!(results.len(), 14);
    for (name, err) in &results {
        assert!(*err < 1e-4, "{name}: {err:e}");
    }
}
