//! Task consistency training for versatile volumetric segmentation from
//! partially labeled datasets.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape
//! - [`unet`]: a five-stage 3D U-Net with a main segmentation head and one
//!   auxiliary two-channel head per class
//! - [`losses`]: partial-label Dice losses, the filtered consistency loss and
//!   the uncertainty-weighted total objective
//! - [`metrics`]: Dice, IoU, HD95 and connected components
//! - [`data`]: phantom generation, file formats and preprocessing
//! - [`trainer`]: Adam, patch sampling, the training loop, checkpoints and
//!   sliding-window evaluation

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor, Var};
