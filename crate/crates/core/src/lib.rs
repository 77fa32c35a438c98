//! Spatial and channel-wise attention autoencoder (SCAAE) for extracting a
//! functional network map at every time step of a 4-D volume series.
//!
//! Layout:
//! - [`tensor`]: dense tensors and the differentiable layer primitives
//! - [`model`]: the attention autoencoder, its forward/backward passes and checkpoints
//! - [`trainer`]: masked MSE, Adam with step decay, the training loop
//! - [`fbn`]: functional network maps from attention artifacts
//! - [`analysis`]: IoU, gradualness, template matching, state-transition graphs
//! - [`synthdata`]: planted-network synthetic series with ground truth
//! - [`volio`]: the SCV1 volume file format, masks, standardization

pub mod analysis;
pub mod error;
pub mod fbn;
pub mod model;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod volio;

pub use error::{Error, Result};
