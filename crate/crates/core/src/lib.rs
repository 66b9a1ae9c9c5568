//! Squeeze-and-excitation recalibration for fully convolutional segmentation networks.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape over dense `f64`
//! tensors ([`graph`]), the channel/spatial/concurrent SE blocks ([`se`]), three
//! encoder/decoder network families ([`zoo`]), the training recipe ([`train`]),
//! Dice and Wilcoxon evaluation ([`metrics`]) and synthetic data plus the binary
//! tensor container ([`data`], [`tensorfile`]).
//!
//! Feature maps use the `(N, C, H, W)` row-major layout everywhere.

pub mod data;
mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod metrics;
pub mod se;
pub mod tensor;
pub mod tensorfile;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{LabelMap, Tensor};
