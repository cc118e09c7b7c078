//! Fixed-point quantization toolkit for small convolutional networks.
//!
//! The pipeline: describe a network ([`netdesc`]), measure the dynamic range
//! of its weights and activations ([`profiler`]), split a fixed bit budget
//! between integer and fractional bits per layer, fine-tune with a
//! full-precision shadow and a quantized forward copy ([`training`]), run
//! zero-skipping low-precision inference ([`inference`]) and export integer
//! weights ([`modelio`]).

pub mod data;
pub mod desk;
pub mod fixedpoint;
pub mod inference;
pub mod modelio;
pub mod netdesc;
pub mod profiler;
pub mod tensor;
pub mod training;

pub use fixedpoint::{FixedPointError, FixedPointFormat, Rounder, RoundingScheme, StreamKey};
pub use inference::{forward, ForwardMode, InferenceError, Model};
pub use netdesc::{build_giga1net, count_ops, count_params, NetDescriptor, NetError};
pub use tensor::{Real, Tensor, TensorError};
