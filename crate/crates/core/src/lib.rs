//! Deconfounded time-series forecasting.
//!
//! The crate simulates confounded panels from a linear structural causal
//! model ([`scm`]), learns a latent confounder sequence with a recurrent
//! multitask factor model ([`factor`]), and measures what feeding that
//! sequence to a forecaster as an extra channel does to multi-horizon error
//! ([`forecast`], [`eval`]). [`pipeline`] wires the stages together.

pub mod error;
pub mod eval;
pub mod factor;
pub mod forecast;
pub mod ingest;
pub mod numerics;
pub mod pipeline;
pub mod scm;

pub use error::{Error, Result};
