//! Plain vision transformer body-pose estimation.
//!
//! This crate holds everything that is pure computation: a dense tensor with
//! tape-based reverse-mode gradients, the ViT backbone with its attention
//! variants, task-factorized feed-forward layers, heatmap decoders, keypoint
//! codecs and losses, OKS/PCKh metrics, the AdamW trainer and the synthetic
//! data generator. It is `no_std` (with `alloc`); file formats, image IO and the
//! command-line tool live in the `vitpose` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod codec;
pub mod data;
pub mod distill;
mod error;
pub mod flops;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
mod real;
pub mod rng;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flops::FlopCounter;
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
