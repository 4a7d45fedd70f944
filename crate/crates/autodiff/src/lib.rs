//! Eager dense-tensor tape with reverse-mode differentiation.
//!
//! The backward pass is recorded on the same tape, so a gradient obtained
//! with `create_graph = true` is an ordinary node and can be differentiated
//! again. That is the one extra level needed to put input-gradients of a
//! network inside a training loss.
//!
//! ```
//! use mfgan_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let dy = tape.grad(y, &[x], true).unwrap()[0];
//! let d2y = tape.grad(dy, &[x], false).unwrap()[0];
//! assert_eq!(tape.item(dy).unwrap(), 6.0);
//! assert_eq!(tape.item(d2y).unwrap(), 2.0);
//! ```

mod check;
mod error;
mod fastmath;
mod op;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use error::{Error, Result};
pub use op::Op;
pub use tape::{Node, Tape, Var};
pub use tensor::Tensor;
