//! Dense tensors, the layer primitives the network needs, and reverse-mode
//! differentiation over them.

mod adam;
mod array;
pub mod ops;
mod scalar;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::Tensor;
pub use ops::{BatchStats, Mode, Padding};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
