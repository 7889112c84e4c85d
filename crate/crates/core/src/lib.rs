//! Travel-time estimation for origin-destination queries from historical trips.

// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod geo;
pub mod index;
pub mod ingest;
pub mod outlier;
pub mod region;
pub mod speed;
pub mod synth;
pub mod time;
pub mod trip;

pub use error::{Error, Result};
