//! Global-to-dense vision-language pre-training at desk scale.
//!
//! An image encoder with attention pooling and a text encoder are aligned
//! contrastively, while a decoder learns to predict a pseudo segmentation
//! mask that is rebuilt every step from the pooling attention itself.
//!
//! Modules follow the pipeline: [`corpus`] generates paired data, [`model`]
//! holds the network, [`pseudo_mask`] turns attention into targets,
//! [`losses`] and [`train`] optimize, [`checkpoint`] persists, [`eval`]
//! measures, and [`diagnostics`] checks gradients end to end.

pub mod checkpoint;
pub mod corpus;
pub mod diagnostics;
mod error;
pub mod eval;
pub mod kv;
pub mod losses;
pub mod model;
pub mod pseudo_mask;
pub mod train;

pub use error::{Error, Result};
