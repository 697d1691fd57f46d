//! Multi-task low-rank adaptation on a small reverse-mode autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors, the tape, and gradient checking.
//! - [`adapters`]: vanilla LoRA, routed multi-head and multi-adapter
//!   variants, the router-free summed variant, and merging.
//! - [`alignment`]: Gaussian-proxy KL and multi-kernel MMD losses over the
//!   down-projection features of different tasks.
//! - [`harness`]: a frozen two-layer backbone and a synthetic multi-task
//!   data generator.
//! - [`trainer`]: Adam, warmup plus cosine schedule, and the training loop.
//! - [`analysis`]: head similarity, task-feature geometry.
//! - [`io`], [`cli`], [`verify`]: file formats, batch commands, and the
//!   built-in verification suites.

pub mod adapters;
pub mod alignment;
pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod harness;
pub mod io;
pub mod trainer;
pub mod verify;
mod error;
pub(crate) mod rng;

pub use error::{Error, Result};
