//! Spatiotemporal frame prediction with detail-context recurrent cells.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors with reverse-mode gradients.
//! * [`cells`]: the detail-context attention block, the ConvLSTM gate
//!   update and their composition.
//! * [`model`]: encoder, stacked recurrent layers and decoder, unrolled over
//!   time, plus checkpoints and parameter accounting.
//! * [`data`]: bouncing-sprite sequence generation and sequence stores.
//! * [`training`]: loss, AdamW, scheduled sampling and the training loop.
//! * [`metrics`]: frame-wise PSNR, SSIM, MSE and MAE.

pub mod cells;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
