//! Background-aware multi-source fusion forecasting.
//!
//! Text summaries are encoded by a small transformer into fixed-length
//! feature vectors, fused with a sliding window of price history and the
//! preceding days' up/down labels (the "prior effect"), and fed to one of
//! several recurrent predictors trained with Adam on binary cross-entropy.
//!
//! Module map:
//!
//! - [`numerics`]: tensors, reverse-mode tape, Adam, parameter stores.
//! - [`ingest`]: market CSV and summary loading, labels, windows, splits.
//! - [`encoder`]: tokenizer, masking, transformer encoder, MLM pretraining.
//! - [`fusion`]: text embedding, convolution, attention, and fusion gate.
//! - [`models`]: recurrent cells, the feedforward baseline, output head.
//! - [`train`]: loss, training loop, metrics, prior-effect ablation.

pub mod encoder;
pub mod error;
pub mod fusion;
pub mod ingest;
pub mod models;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
