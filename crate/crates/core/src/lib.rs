pub mod aggregation;
#[cfg(feature = "cli")]
pub mod cli;
pub mod error;
pub mod kernels;
pub mod lfa;
pub mod mi;
pub mod numeric;
pub mod synth;

pub use error::{Error, Result};
