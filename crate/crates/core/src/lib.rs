//! Symbol detection from in-context examples over block-fading channels.

pub mod baselines;
pub mod channel;
pub mod cli;
pub mod constellation;
pub mod error;
pub mod eval;
pub mod model;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
