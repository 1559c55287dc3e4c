mod common;

use common::gradcases::{composed_cases, primitive_cases};

#[test]
fn primitives_match_finite_differences() {
    for case in primitive_cases() {
        for seed in 0..10 {
            let err = (case.run)(seed);
            assert!(err < 1e-5, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn composed_blocks_match_finite_differences() {
    for case in composed_cases() {
        for seed in 0..10 {
            let err = (case.run)(seed);
            assert!(err < 1e-5, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}
