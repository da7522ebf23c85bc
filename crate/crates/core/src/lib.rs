//! Deep SNR-robust feedback (DRF) codes for fading channels with noisy
//! passive output feedback.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod channel;
pub mod csi;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod trainer;

pub use error::{DrfError, Result};
