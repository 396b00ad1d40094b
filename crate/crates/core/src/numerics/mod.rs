//! Tensor algebra, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheck};
pub use tape::{mean_pool_rows, softmax_rows_value, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Matrix product of two value tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Row-wise softmax of a value tensor.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    softmax_rows_value(x, mask)
}

/// Mean over rows of `-log softmax(logits_t)[target_t]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = tape.cross_entropy(l, targets)?;
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests;
