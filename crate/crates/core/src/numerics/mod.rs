//! Tensor arithmetic, reverse-mode differentiation, Adam, and a
//! finite-difference oracle for checking gradients.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use tape::{Elementwise, Gradients, NodeId, Tape};
pub use tensor::Tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform in [−1/√fan_in, 1/√fan_in].
pub fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}
