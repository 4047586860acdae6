//! Desk-scale laboratory for gradient-surgery-gated mean-teacher training
//! with boundary-aware contrastive regularization, on synthetic multi-domain
//! 3D vessel segmentation volumes.

pub mod datagen;
pub mod error;
pub mod expcli;
pub mod gsema;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
