//! Multimodal segmentation transformer at desk scale.
//!
//! One hierarchical transformer encoder per input modality, a per-stage
//! fusion block (channel-concat linear fusion, multi-scale parallel
//! convolutions, squeeze-and-excitation channel attention on the residual),
//! and a shared MLP decoder, all built on a self-contained autodiff tensor
//! kernel. Training, confusion-matrix metrics, analytic parameter/FLOP
//! accounting, a portable dataset format with a synthetic-data generator,
//! and a CLI round out the toolkit.

pub mod encoder;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod label;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
