//! Claw UNet for binary vessel segmentation on the CPU.
//!
//! - [`nn`]: tensor kernels, reverse-mode tape and finite-difference checks
//! - [`model`]: the network, its parameters and checkpoints
//! - [`metrics`]: MIoU, Dice and average Hausdorff distance
//! - [`data`]: PNG datasets, splitting, resizing and synthetic vessels
//! - [`train`]: optimizers, the training loop and the ablation runner

pub mod data;
pub mod error;
pub mod kv;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use model::{ClawParams, ModelConfig};
pub use nn::Mode;
pub use tensor::{Real, Tensor};
