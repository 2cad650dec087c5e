//! Desk-scale laboratory for the relativistic pairing GAN objective with
//! zero-centered R1/R2 penalties and burn-in hyperparameter schedules.

pub mod diff;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod rebalance;
pub mod schedule;
pub mod testbeds;
pub mod trainer;

pub use error::{Error, Result};

/// Seedable generator used everywhere a run must be reproducible.
pub type LabRng = rand_chacha::ChaCha8Rng;
