//! Synthetic scene datasets, training and evaluation pipelines, and the
//! command-line front end.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod inspect;
pub mod optim;
pub mod train;

pub use error::{HarnessError, Result};
