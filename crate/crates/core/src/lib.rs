//! Width folding for convolution and GEMM operators.
//!
//! Folding trades a spatial axis that the kernel does not slide over for
//! extra channels, so that narrow-channel layers (a single-channel or RGB
//! first layer, a GEMM with a tiny reduction dimension) meet the channel
//! alignment that matrix units expect, without changing the results.
//!
//! - [`tensor`]: dense `f32` tensors and on-disk bundles.
//! - [`refconv`]: reference NHWC convolution and MAC accounting.
//! - [`fold`]: legality analysis and the folding maps themselves.
//! - [`blockdiag`]: block-diagonal filter storage and grouped execution.
//! - [`gemm`]: GEMM as a 1x1 convolution and tall-skinny folding.
//! - [`ir`]: a small graph IR with an interpreter and the folding pass.
//! - [`cli`]: the `widthfold` command-line front end.

pub mod blockdiag;
pub mod cli;

pub mod error;
pub mod fold;
pub mod gemm;
pub mod ir;

pub mod refconv;
pub mod synth;

pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
