//! Federated forward twinning of network digital twins (NDTs), adaptive
//! checkpointing, and rollback-based untwinning of single (SRU) and parallel
//! (PRU) removal requests.

// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod error;
pub mod float_serde;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod synth;
pub mod topology;
pub mod untwin;

pub use error::{Error, Result};
