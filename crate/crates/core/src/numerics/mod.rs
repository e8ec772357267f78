//! Deterministic dense linear algebra and seeded randomness.

mod matrix;
mod rng;

pub use matrix::{
    add, argmax, cosine, cross_entropy_from_logits, gelu, gelu_deriv, hadamard, l2_norm,
    layer_norm, log_softmax, matmul, outer, row_slice, scale, softmax, softmax_with_temperature,
    transpose, Matrix, Vector,
};
pub use rng::{tag_from_str, Rng};
