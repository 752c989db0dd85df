//! Two-stage unsupervised cross-modality segmentation: global alignment by
//! feature-disentangled style transfer, then local alignment with a
//! dual-discriminator segmentor whose target features are reweighted by a
//! discriminator-derived local feature mask.

pub mod cli;
pub mod data_io;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod segmentation;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
