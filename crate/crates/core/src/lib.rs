//! Residual-stream decomposition and cross-pattern comparison for few-shot
//! segmentation.
//!
//! The crate is `no_std` + `alloc`; file formats, configuration and the
//! command-line driver live in the `sdrc` companion crate.
//!
//! Layout:
//!
//! - [`tensor`] and [`autodiff`]: dense `f32` tensors and a define-by-run tape
//!   with `f64` internals.
//! - [`vit`]: a small vision transformer whose forward pass records every
//!   additive contribution to the residual stream.
//! - [`analysis`]: HSIC/CKA, layer-pair CKA grids, the cosine cross-term
//!   decomposition and a histogram mutual-information estimator.
//! - [`osd`], [`cpc`], [`fusion`]: orthogonal bottleneck, cross-pattern score
//!   maps, score fusion, prediction and losses.
//! - [`episodes`]: procedural source/target domains and episodic sampling.
//! - [`trainer`]: source training, target finetuning and evaluation.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod cpc;
pub mod episodes;
mod error;
pub mod fusion;
pub(crate) mod math;
pub mod optim;
pub mod osd;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, MaskSide, Result};
pub use tensor::Tensor;
