//! Robust fine-tuning and robustness certification for frame-wise accident
//! anticipation models.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod data;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
