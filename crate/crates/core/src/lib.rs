//! Masked self-supervised pre-training and probabilistic density labeling
//! for post-processing gridded rainfall forecasts.
//!
//! The crate is organised bottom-up:
//!
//! * [`gridio`]: the `SSLG` field format, normalization and cropping
//! * [`synth`]: synthetic truth/forecast pairs with NWP-like biases
//! * [`labeling`]: one-hot and density labels, sampling, augmentation
//! * [`patching`]: 3D patch tokens and random masking
//! * [`nn`]: a small encoder–decoder with hand-written gradients
//! * [`objectives`]: masked reconstruction and mixed cross-entropy losses
//! * [`verify`]: contingency tables, CSI family scores and mIoU
//! * [`pipeline`]: pre-training, fine-tuning, evaluation and ablations

pub mod error;
pub mod gridio;
pub mod labeling;
pub mod nn;
pub mod objectives;
pub mod patching;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
