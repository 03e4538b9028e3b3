//! Knowledge tracing with decay-aware attention, pivot-generated decoder
//! weights, and leveled fine-tuning.
//!
//! The crate is self-contained: [`tensor`] provides the reverse-mode
//! differentiation substrate everything else trains on, [`dataio`] turns
//! interaction logs into fixed-length windows, [`model`] assembles the
//! network, and [`training`], [`leveled`] and [`simgen`] cover optimization,
//! ability-stratified fine-tuning, and synthetic data. The `lana` binary in
//! [`cli`] stitches these into an end-to-end workflow.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod leveled;
pub mod model;
pub mod pivot;
pub mod simgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
