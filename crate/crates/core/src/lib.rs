//! Inner-loop feedback for diffusion transformers, at toy scale.
//!
//! A small class-conditional DiT backbone with its own autodiff, a DDIM
//! sampler, the feedback module and its distillation training, a block
//! caching baseline, drift and quality analysis, and the run tooling that
//! ties them together.

pub mod analysis;
pub mod backbone;
pub mod caching;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod ilf;
pub mod io;
pub mod numerics;
pub mod schedule;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
