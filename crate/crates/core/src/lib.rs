//! CPU implementation of a point-cloud semantic segmentation network built on
//! selective state-space (Mamba-style) sequence blocks.
//!
//! The pipeline: sparse voxelization of the input cloud, serialization of the
//! active cells along a space-filling curve, fixed-length subsequence
//! partitioning, selective-scan sequence blocks inside a 5-stage U-Net with
//! grid pooling, and a linear classification head broadcast back to the points.
//!
//! All learnable operations run on a small tape-based reverse-mode autodiff
//! engine ([`tensor`]) that is generic over the scalar type; the shipped
//! network uses `f64` throughout so that every layer can be validated against
//! central finite differences.

pub mod blocks;
pub mod data;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod network;
pub mod scalar;
pub mod sfc;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor used by the shipped network.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor, for callers that trade accuracy for memory.
pub type Tensor32 = tensor::Tensor<f32>;
/// Default-precision autodiff tape.
pub type Tape64 = tensor::Tape<f64>;
/// Default-precision parameter store.
pub type ParamStore64 = tensor::ParamStore<f64>;
