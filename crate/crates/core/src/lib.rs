#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod error;
pub mod estimators;
pub mod experiments;
mod kernel;
pub mod measures;
mod newton;
pub mod numeric;
pub mod rng;
pub mod sinkhorn;

pub use error::{Error, Result};
