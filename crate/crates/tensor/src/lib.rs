//! Dense `f64` tensors, a reverse-mode gradient tape with the neural
//! primitives the relationship decoder needs, finite-difference gradient
//! checking, and the binary checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, check_gradients_many, GradCheckReport};
pub use ops::{gumbel_noise, GumbelNoise};
pub use tape::{Backward, Tape, Var};
pub use tensor::{BoundParams, ParamId, ParamStore, Parameter, Tensor};

pub use ops::{sigmoid, Unary};
