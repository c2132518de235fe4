//! Multi-scale tensorial summation networks for edge detection.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`kernels`] and [`tape`]: dense `f64` tensors, raw kernels
//!   and a reverse-mode tape over them.
//! * [`mts`] and [`nn`]: GTS/MTS layers, convolutions, the multi-head gate
//!   and conditional convolution, generic over parameter leaves
//!   ([`params`]).
//! * [`model`]: the MTS-DR backbone, residual gate, refinement network, cost
//!   accounting and checkpoints.
//! * [`training`], [`data`], [`eval`]: loss and optimizer, datasets and
//!   augmentation, edge-detection metrics.
//! * [`gradcheck`]: finite-difference checks for every differentiable op.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod mts;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use kernels::{mode_n_product, ConvGeom};
pub use model::{NetworkConfig, Network, SideOutputs};
pub use params::{ParamStore, ParamTree};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
