//! Lightweight multi-wavelength aurora classification on the CPU.
//!
//! The crate contains everything needed to train and deploy a small
//! multi-view convolutional classifier:
//!
//! - [`tensor`] and [`autograd`]: dense tensors, numeric kernels and a
//!   tape-based reverse-mode differentiator with gradient checking;
//! - [`nn`]: named layers and the RECblock, MSRM, LAFE and LCT blocks;
//! - [`models`]: ConvNeXt-Tiny, LCTNet and MLCNet, shared-weight multi-view
//!   fusion and the `MLCW` weight file;
//! - [`reparam`]: folding training-time RECblocks into single convolutions;
//! - [`data`]: synthetic three-wavelength aurora phantoms, PGM datasets,
//!   preprocessing and augmentation;
//! - [`train`]: AdamW training, evaluation metrics and ablation grids;
//! - [`analysis`]: parameter and FLOPs accounting, class activation maps
//!   and latency benchmarks;
//! - [`cli`]: the `mlcnet` command-line tool.
//!
//! ```
//! use mlcnet::models::{Model, ModelConfig};
//! use mlcnet::nn::Phase;
//! use mlcnet::reparam::fuse_model;
//! use mlcnet::tensor::{Shape, Tensor};
//!
//! let model = Model::new(ModelConfig::mlcnet())?;
//! let params = model.init(42)?;
//! let views = vec![Tensor::<f32>::full(Shape::new(1, 1, 32, 32), 0.5); 3];
//! let logits = model.predict(&params, Phase::Training, &views)?;
//!
//! let fused = fuse_model(&model, &params)?;
//! let fast = model.predict(&fused.store, Phase::Inference, &views)?;
//! assert!(logits.max_abs_diff(&fast) < 1e-4);
//! # Ok::<(), mlcnet::Error>(())
//! ```

pub mod analysis;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod reparam;
pub mod tensor;
pub mod train;
#[cfg(test)]
mod testutil;
pub mod util;

pub use error::{Error, Result};

/// The user guide in `book/`, compiled so that its examples stay correct.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    mod blocks {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/reparam.md")]
    mod reparam {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
