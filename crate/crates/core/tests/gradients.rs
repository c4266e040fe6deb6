//! Finite-difference checks of the backward pass for every network
//! architecture used by the toolkit.

#[path = "support/fdcheck.rs"]
mod fdcheck;

use fdcheck::{all_architectures, check_architecture, POINTS};

#[test]
fn every_architecture_matches_finite_differences() {
    for (seed, (name, arch)) in all_architectures().into_iter().enumerate() {
        let worst = check_architecture(name, arch, seed as u64 + 1).unwrap_or_else(|e| panic!("{e}"));
        println!("{name}: {POINTS} coordinates, max relative error {worst:.2e}");
    }
}
