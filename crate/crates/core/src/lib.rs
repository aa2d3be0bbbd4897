//! Numeric core for a distill-then-adapt bearing-fault pipeline: a 1-D CNN
//! teacher, a single-layer student trained with decoupled knowledge
//! distillation, and LoRA adapters that fine-tune the frozen student.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, training loops and
//! the command line live in the companion `dkdl` crate.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is deliberate: it rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod signal;
pub mod synth;
pub mod tensor;

pub use autodiff::{BatchNormMode, BatchStats, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
