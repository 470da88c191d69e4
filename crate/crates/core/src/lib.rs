//! Sentence boundary detection for unpunctuated French text.
//!
//! The pipeline turns raw text into a `<SEG>`-marked token stream
//! ([`normalize`]), labels each word by whether a boundary follows it
//! ([`window`]), embeds fixed-width context windows with pretrained word
//! vectors ([`embeddings`]) and classifies them with one of three small
//! convolutional networks ([`models`]) built on a self-contained tensor
//! engine ([`tensor`]). [`train`] holds the training loop and the
//! per-class metrics, [`pipeline`] the end-to-end segmentation of raw text.

pub mod embeddings;
pub mod error;
pub mod models;
pub mod normalize;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod window;

pub use error::{ErrorKind, Result, SbdError};
