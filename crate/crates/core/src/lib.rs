//! Cell instance segmentation with a plain ViT encoder, a CNN spatial-prior
//! adapter injected through deformable cross-attention, and a HoVer-style
//! tri-branch decoder; plus losses, watershed postprocessing, panoptic
//! quality metrics, a synthetic dataset generator and the training harness.

pub mod adapter;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod ops;
pub mod registry;
pub mod types;

pub use error::{Error, Result};
