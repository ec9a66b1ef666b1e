//! Building-footprint segmentation toolkit: dataset preparation, three
//! U-Net-family models, class-imbalance losses, metrics, training with
//! one-cycle scheduling, and softmax-confidence ensembling with classical
//! post-processing.

pub mod config;
pub mod dataset;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod training;

mod error;

pub use error::{Error, Result};
pub use footprint_grad as grad;
