//! Dense tensors and reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Tape, Var, IGNORE_INDEX, LN_EPS};
pub use tensor::{DType, Scalar, Tensor};

pub(crate) use tape::{log_sum_exp, softmax_into};

/// Numerically stable softmax of a plain slice.
pub fn softmax<T: Scalar>(row: &[T]) -> alloc::vec::Vec<T> {
    let mut out = alloc::vec![T::zero(); row.len()];
    softmax_into(row, &mut out);
    out
}

/// `log softmax(row)[i]`.
pub fn log_prob<T: Scalar>(row: &[T], i: usize) -> T {
    row[i] - log_sum_exp(row)
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (libm::sqrt(na) * libm::sqrt(nb))).clamp(-1.0, 1.0))
}
