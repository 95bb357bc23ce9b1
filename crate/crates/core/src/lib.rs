//! Conditional flow matching with self-purifying label filtering.
//!
//! A sample's condition is trusted only while the conditional flow-matching
//! loss does not exceed the unconditional one; otherwise the sample is used
//! for unconditional training. The crate bundles everything needed to study
//! that gate on synthetic 2D data: the network and its optimizer ([`net`]),
//! the training loop ([`flow`]), datasets ([`data`]), guided Euler sampling
//! ([`sampler`]), evaluation ([`eval`]) and the experiment runner ([`cli`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod net;
pub mod plot;
pub mod rng;
pub mod sampler;

pub use error::{Result, SpfmError};
