//! Small reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Everything is a 2-D array: batches are rows, features are columns, and
//! scalars are `1×1`. A [`Tape`] records operations as they are applied to
//! [`Var`] handles; [`Tape::backward`] walks the record in reverse and returns
//! [`Gradients`] for every node.
//!
//! Derivative nodes such as [`Var::silu_grad`] are ordinary differentiable
//! operations, which is what lets a network's input-Jacobian (for example the
//! trace term of a continuous flow) appear inside a loss that is itself
//! differentiated with respect to the weights.

mod layers;
mod optim;
mod tape;

pub use layers::{Activation, Bound, Linear, Mlp, ParamId, ParamStore};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("parameter store layout mismatch: {0}")]
    Layout(String),
}
