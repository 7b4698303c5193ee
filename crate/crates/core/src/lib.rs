//! Multiscale tensor summation (MTS) operators and a compressive sensing
//! network built from them.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense tensors, mode products, unfoldings, Kronecker products.
//! - [`patching`]: window embedding of images into patch stacks, padding.
//! - [`mts`]: GTS and MTS operators with adjoints, gradients and dense
//!   materialisation.
//! - [`network`]: encoder, nonlinear adjoint back-projection and residual
//!   MTS refinement blocks.
//! - [`train`], [`metrics`]: training loop, optimiser, PSNR/SSIM.
//! - [`io`]: configuration and binary file formats.

pub mod error;
pub mod io;
pub mod metrics;
pub mod mts;
pub mod network;
pub mod patching;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{MtsError, Result};
pub use io::{MeasurementFile, Precision, RunConfig};
pub use metrics::{psnr, ssim};
pub use mts::{GtsOperator, MtsGeometry, MtsOperator, WindowRule};
pub use network::{Activation, ActivationKind, CsModel, ModelConfig, MtsBlock};
pub use patching::PatchConfig;
pub use tensor::{DenseMatrix, Real, Tensor};
pub use train::{Dataset, EvalReport, TrainConfig, TrainState};
