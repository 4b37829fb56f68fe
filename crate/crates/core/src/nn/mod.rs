//! A small encoder–decoder with explicit forward and backward passes.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{ArchConfig, FeaturePyramid, Head, TinyNet, TokenEmbed};
pub use optim::{OptimizerConfig, OptimizerKind, Precision, TrainState};
pub use params::ParamStore;
pub use tensor::Fmap;
