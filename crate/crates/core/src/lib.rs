//! Desk-scale lab for studying whether a small transformer solves related
//! addition subtasks with the same attention-head circuit.
//!
//! The pipeline: train a toy decoder-only transformer on few-shot m,n-digit
//! addition ([`trainer`]), measure per-head influence with denoising
//! activation patching ([`patching`]), then compare the resulting influence
//! maps across subtasks ([`analysis`]).

pub mod analysis;
pub mod error;
pub mod io_util;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod report;
pub mod seeds;
pub mod tasks;
pub mod trainer;

pub use error::{LabError, Result};
