//! Shared fixtures for the benchmarks.

use swa_core::data::{generate, Generator};
use swa_core::{Activation, Batch, MlpSpec, MlpState};

/// The desk-scale network with a batch of `n` spiral points.
pub fn desk_fixture(n: usize) -> (MlpState, Batch) {
    let spec = MlpSpec::uniform(vec![2, 32, 32, 2], Activation::Relu, true, 5e-4).expect("valid spec");
    let batch = generate(&Generator::Spirals, n, 0.05, 0).expect("valid generator");
    (MlpState::init(&spec, 0), batch)
}
