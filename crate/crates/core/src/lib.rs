//! Sequence forecasters for electric-vehicle battery state of charge and
//! temperature.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with tape-based reverse-mode autodiff.
//! - [`nn`]: linear maps, layer norm, positional encoding, attention, FFN and
//!   stacked LSTMs built on the tape.
//! - [`model`]: the five forecasting architectures behind one interface, plus
//!   the binary checkpoint container.
//! - [`data`]: trip CSV ingest, sensor aggregation, Savitzky-Golay smoothing,
//!   resampling, windowing, normalization/splitting and a synthetic trip
//!   generator.
//! - [`train`]: MSE loss, Adam/SGD, the teacher-forced training loop,
//!   evaluation metrics and the experiment-grid runner.
//! - [`config`]: the TOML run configuration shared by the command-line tool.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Tensor, TensorError, Var};
