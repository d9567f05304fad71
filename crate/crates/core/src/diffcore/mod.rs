//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they run; [`Var`] is a handle into it. Leaves are
//! created with [`Tape::param`] (collects gradients) or [`Tape::constant`]. After
//! [`Tape::backward`] on a scalar, [`Var::grad`] returns the accumulated gradient.
//!
//! ```
//! use arckd::diffcore::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let x = tape.constant(Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap());
//! let y = w.dot(x).unwrap();
//! assert_eq!(y.value().item().unwrap(), 32.0);
//! tape.backward(y).unwrap();
//! assert_eq!(w.grad().data(), &[4.0, 5.0, 6.0]);
//! ```

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use ops::{concat, stack};
pub(crate) use ops::softmax_rows;
#[cfg(test)]
pub(crate) use ops::log_softmax_rows;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Softmax of a plain vector at temperature `t`, outside any tape.
pub fn softmax_values(logits: &[f64], t: f64) -> Vec<f64> {
    let x = Tensor::from_parts(vec![logits.len()], logits.to_vec());
    softmax_rows(&x, t).into_data()
}
