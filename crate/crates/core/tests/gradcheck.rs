//! Finite-difference gradient checks for every primitive and a small denoiser.

mod support;

use support::grad::{primitives, tiny_denoiser, END_TO_END_TOL, PRIMITIVE_TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    let results = primitives();
    assert!(results.len() >= 19);
    for (name, err) in results {
        assert!(err < PRIMITIVE_TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn tiny_denoiser_end_to_end() {
    let err = tiny_denoiser();
    assert!(err < END_TO_END_TOL, "end-to-end max relative error {err:e}");
}
