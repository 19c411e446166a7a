//! Detector-free image captioning with concept tokens.
//!
//! The pipeline: a plain ViT encoder turns an image into a grid of visual
//! tokens; a concept head predicts a bag of caption words from the grid
//! with a focal multi-label loss; the top-scoring concepts are embedded and
//! fed, together with the visual tokens, into an autoregressive decoder
//! that writes the caption. Everything runs on a small reverse-mode
//! autodiff tape built for exactly this model family.
//!
//! Module layout:
//! - [`tensor`], [`tape`], [`params`], [`optim`], [`gradcheck`]: the
//!   numeric core.
//! - [`text`]: tokenizer, vocabulary, concept label extraction.
//! - [`encoder`], [`ctn`], [`decoder`], [`model`]: the model itself.
//! - [`train`]: two-stage training loop with optional distillation.
//! - [`metrics`], [`data`], [`checkpoint`]: evaluation and persistence.

pub mod blocks;
pub mod checkpoint;
pub mod ctn;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamGroup, ParamSet, Parameter};
pub use tape::{BoolMask, Tape, VarId};
pub use tensor::{Dtype, Scalar, Tensor};
