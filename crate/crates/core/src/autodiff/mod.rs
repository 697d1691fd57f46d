//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live on a [`Tape`]; every operation appends a node and returns a
//! [`Var`] handle. [`Tape::backward`] sweeps the tape once in reverse,
//! accumulating gradients additively across fan-out.
//!
//! ```
//! use adapterforge::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]).with_requires_grad(true));
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x), vec![2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, compare_with_central_differences, grad_check, GradCheck};
pub use tape::{Elementwise, Gradients, Reduction, Tape, Var};
pub use tensor::Tensor;
