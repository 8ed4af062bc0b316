//! Minimal tensor and reverse-mode autodiff substrate.

pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{Activation, BatchNorm, BnMode, Conv1d, ConvResidualBlock, Ctx, Dense, Lstm};
pub use optim::{AdamW, AdamWConfig};
pub use params::{LayerGroup, ParamId, ParamKind, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
