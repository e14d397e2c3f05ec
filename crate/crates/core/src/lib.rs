//! Continual adapter routing over frozen features.
//!
//! Each task gets its own residual adapter and linear head which are trained
//! once and frozen. A shared task selector, stabilised by per-task prototypes
//! and a feature-level replay buffer, decides at inference time which
//! adapter/head pair a sample belongs to.

pub mod adapters;
pub mod config;
pub mod data;
pub mod diffnet;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod report;
pub mod routing;
pub mod selector;
pub mod trainer;

pub use error::{Error, Result};
