//! A small from-scratch CNN engine: NCHW tensors, the layers used by the
//! residual and fully connected model families, reverse-mode gradients,
//! Adam, training/evaluation loops and a binary checkpoint format.
//!
//! Everything is generic over [`Real`] so the same code runs in single
//! precision for training and in double precision for gradient checks.

mod adam;
mod checkpoint;
mod data;
pub mod gemm;
pub mod gradcheck;
mod model;
mod network;
pub mod ops;
mod tensor;
mod train;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::ImageSet;
pub use model::{build_model, Family, Model, ModelSpec};
pub use network::{
    BatchNorm2d, Conv2d, DenseCapture, ForwardCache, Gradients, Layer, Linear, MaxPool2d, Network, Param, Residual,
};
pub use ops::{BnMode, ConvGeometry, PoolGeometry, PoolPadding, RunningStats};
pub use tensor::Tensor;
pub use train::{evaluate, predict, rank_of_label, resume, train, train_with_progress, EpochRecord, TrainConfig};

/// Floating-point element type of tensors and parameters.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}
