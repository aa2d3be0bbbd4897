//! Data ingestion, training procedures, evaluation and the `dkdl` command
//! line on top of [`dkdl_core`].

// `!(x > 0.0)` is deliberate: it rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod mat;
pub mod train;

pub use error::{Error, Result};
