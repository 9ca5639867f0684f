mod common;

use common::{non_bt_check, primitive_checks, residual_check};

const TOLERANCE: f64 = 1e-6;

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..2 {
        for (name, err) in primitive_checks(seed).unwrap() {
            assert!(err < TOLERANCE, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn non_bottleneck_block_gradients() {
    let err = non_bt_check(11).unwrap();
    assert!(err < TOLERANCE, "{err:e}");
}

#[test]
fn residual_block_gradients_with_and_without_projection() {
    for (stride, cin, cout) in [(1, 3, 3), (2, 2, 4)] {
        let err = residual_check(5, stride, cin, cout).unwrap();
        assert!(err < TOLERANCE, "stride {stride} {cin}->{cout}: {err:e}");
    }
}
