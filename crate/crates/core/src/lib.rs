//! Relationship decoder with representative-point sampling, the
//! attention-based relation head, training losses, logit adjustment and
//! recall metrics.

pub mod decoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod layers;
pub mod losses;
pub mod model;
pub mod pgla;
pub mod relation;
pub mod sampler;

pub use error::{CoreError, Result};
