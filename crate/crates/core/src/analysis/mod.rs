//! Diagnostics run on built models: head similarity, Taylor channel
//! importance and gradient checks.

pub mod gradcheck;
pub mod importance;
pub mod similarity;

use evit_tensor::{Element, Fill, Rng, Tensor};

use crate::Result;

/// Inputs are drawn from a stream separate from the one used for weights.
pub const INPUT_STREAM: u64 = 0x5EED_DA7A;

/// Uniform `[-1, 1)` input batch derived from `seed`.
pub fn random_input<E: Element>(seed: u64, dims: Vec<usize>) -> Result<Tensor<E>> {
    let mut rng = Rng::new(seed ^ INPUT_STREAM);
    Ok(Tensor::new(dims, Fill::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 })?)
}

/// Uniform class labels derived from `seed`.
pub fn random_labels(seed: u64, batch: usize, classes: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed ^ INPUT_STREAM ^ 0xFFFF);
    (0..batch).map(|_| rng.index(classes)).collect()
}
