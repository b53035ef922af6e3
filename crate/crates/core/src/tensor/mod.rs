//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value. [`Tape`] records a forward
//! computation over tensors and replays it backwards to produce gradients,
//! including gradients with respect to inputs (used by the guided sampler).
//! [`ParamStore`] owns named parameters together with their Adam moments and
//! exponential-moving-average shadows.

mod store;
mod tape;
mod value;

pub use store::{AdamConfig, Leaves, ParamStore};
pub(crate) use store::Param;
pub use tape::{Tape, Var};
pub use value::Tensor;
