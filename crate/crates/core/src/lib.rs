//! Historical-control comparative-effectiveness toolkit.
//!
//! Cohort construction from longitudinal registry records, per-stratum
//! entropy balancing, weighted effect estimation with robust inference, and a
//! synthetic registry generator with known ground truth.

pub mod balance;
pub mod codes;
pub mod covariates;
pub mod error;
pub mod estimate;
pub mod months;
pub mod pipeline;
pub mod registry;
pub mod synth;

pub use error::{Error, Result};
