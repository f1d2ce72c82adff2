//! Deep attractor networks for single-channel speech separation.

pub mod adanet;
pub mod attractor;
pub mod cli;
pub mod data;
pub mod dsp;
pub mod error;
pub mod inference;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perm;
pub mod train;

pub use error::{Error, Result};
