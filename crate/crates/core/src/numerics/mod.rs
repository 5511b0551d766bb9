//! Dense arrays, reverse-mode differentiation and the gradient checker.

mod array;
pub mod gradcheck;
pub mod ops;
mod optim;
mod params;
mod tape;

pub use array::{lit, DiffArray, Real};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};
pub use params::{BoundParams, ParamEntry, ParamId, ParamStore};
pub use tape::{
    exprel, inject_backward_fault, sigmoid, softplus, Gradients, Primitive, Tape, Var, GATHER_ZERO,
};
