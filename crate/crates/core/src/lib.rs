//! Micro U-Net laboratory for pre-task transfer, batch-norm statistics
//! adaptation and significance-tested segmentation evaluation on synthetic
//! hazard-mapping tasks.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod layers;
pub mod numerics;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
