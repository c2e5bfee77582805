//! Contextual EM attention and distinctive-word supervision for generating
//! audio descriptions over consecutive video clips.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, parameter storage, gradient checks
//! - [`dataio`]: clip corpora, the `DADF` container, tokenization, windows, synthetic data
//! - [`alignment`]: video/AD contrastive and multi-instance objectives and the adapter loop
//! - [`contextual_ema`]: resampling, EM over a window, cross-attention and fusion
//! - [`narration`]: prompts, the causal decoder, auto-regressive and distinctive losses
//! - [`metrics`]: ROUGE-L, CIDEr, Recall@k/N and redundancy contrast
//! - [`checks`]: the finite-difference gradient suite

pub mod alignment;
pub mod checks;
pub mod contextual_ema;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod narration;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{ParamStore, Real, Tensor};
