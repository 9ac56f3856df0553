//! Multiple-instance tagging of transportation and warning sounds.

pub mod cli;
pub mod embed;
pub mod error;
pub mod evalfuse;
pub mod features;
pub mod mil;
pub mod nn;

pub use error::{Error, Result};
