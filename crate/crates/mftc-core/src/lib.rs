//! Multi-aperture fused transformer-convolution network (MFTC-Net) for 3D
//! volumetric segmentation, with the full training and evaluation stack:
//! volume I/O and synthetic phantoms, nested-aperture patch pyramids, 3D
//! shifted-window transformer encoders paired with convolutional branches
//! through attention-based fusion blocks, a center-insertion decoder,
//! distance-weighted losses, exact distance transforms, Dice/HD95 metrics,
//! sliding-window inference, a deterministic trainer, and mesh/montage
//! visualization. Everything is pure Rust, f64 end to end, single-threaded
//! and bit-reproducible.

// Config validation deliberately writes `!(x > 0.0)` so NaN fails closed.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aperture;
pub mod check;
pub mod config;
pub mod edt;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod params;
pub mod phantom;
pub mod swin;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
