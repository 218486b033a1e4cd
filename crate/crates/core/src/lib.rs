//! Convolutional Transformer toolkit for long sequence time series
//! forecasting.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: `[batch × length × dim]` tensors with a reverse-mode tape.
//! * [`attention`]: canonical, ProbSparse and LogSparse attention, and the
//!   CSP block that halves attention cost.
//! * [`connectors`]: dilated causal distilling stages and the passthrough
//!   feature-pyramid fusion.
//! * [`model`]: encoder/decoder assembly and the eight variant presets.
//! * [`complexity`]: closed-form and counted multiply costs, parameter
//!   accounting and receptive-field analysis.
//! * [`data`]: CSV ingestion, normalization, splits, windows and synthetic
//!   series.
//! * [`train`]: Adam, the learning-rate schedule, early stopping and metrics.

pub mod attention;
pub mod complexity;
pub mod connectors;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
