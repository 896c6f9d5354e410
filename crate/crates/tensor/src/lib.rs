//! Dense `f64` tensors with tape-based reverse-mode automatic
//! differentiation.
//!
//! A [`Tape`] records every operation applied during a forward pass. Each
//! op is a method on the tape that takes [`Var`] handles and returns a new
//! handle; [`Tape::backward`] then walks the records in reverse and yields
//! the gradient of a scalar loss with respect to every leaf created with
//! [`Tape::leaf`]. Tapes are single-use and rebuilt for every step.
//!
//! ```
//! use dmm_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.square(x).unwrap();
//! let loss = tape.mean(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0 / 3.0, 4.0 / 3.0, 2.0]);
//! ```

mod error;
mod gemm;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::elementwise::{sigmoid, Elementwise};
pub use ops::norm::DEFAULT_EPS as GROUP_NORM_EPS;
pub use ops::reduce::Reduction;
pub use tape::{BackwardContext, Gradients, Operation, Tape, Var};
pub use tensor::Tensor;
