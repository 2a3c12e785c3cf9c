//! Collision prediction from RGB and event-camera input.
//!
//! The library implements the full pipeline around a dual-encoder fusion
//! network that regresses the collision point (x, y in mm, relative to a
//! static drone) and time to collision (ms) of a thrown ball:
//!
//! - [`tensor`]: dense f32 tensors with reverse-mode autodiff (conv, pool,
//!   linear, softmax, attention, dropout, MSE) and a finite-difference
//!   gradient checker.
//! - [`events`]: event-stream accumulation into 80×80 polarity-difference
//!   frames, RGB resizing/normalization, window stacking.
//! - [`model`]: the three fixed architectures (EVS-only, RGB-only, fusion)
//!   plus layer descriptors and parameter counting.
//! - [`quant`]: quantization-aware training (LSQ+ 2–8 bit; DoReFa, IRNet,
//!   IRNet*, ReActNet at 1 bit) and bit-packed XNOR-POPCNT inference kernels.
//! - [`accounting`]: per-layer operation/memory accounting reduced to the
//!   scalar `OPs = BOPs/64 + INT4/8 + INT8/4 + FLOPs` metric.
//! - [`synth`]: synthetic ball-throw recordings (ballistics, pinhole
//!   rendering, event simulation), collision labels, splits, file format.
//! - [`train`]: Adam + weight decay + clipping + plateau LR + early stopping
//!   + stochastic weight averaging over recording windows.
//! - [`eval`]: distance-binned error statistics, throughput benchmarks, CSV
//!   and SVG reports.
//! - [`checkpoint`]: versioned binary containers for trained models and
//!   their compressed quantized exports.
//! - [`cli`]: the `evfuse` command-line entry points.

pub mod accounting;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod events;
pub mod model;
pub mod quant;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
