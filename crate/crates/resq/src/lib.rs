//! Fixed-point video inference simulator built around residual (sigma-delta)
//! quantization: keyframes run through high-precision quantizers, the frames
//! between them transmit only quantized differences against a cached
//! reference, and an optional per-pixel policy picks bit-widths from a pool
//! based on where the scene actually changed. Everything is desk-scale and
//! deterministic so behaviour can be pinned by brute-force oracles.

pub mod bops;
pub mod calibration;
pub mod engine;
pub mod error;
pub mod harness;
pub mod model_io;
pub mod notation;
pub mod pgm;
pub mod policy;
pub mod quantizer;
pub mod rtf;
pub mod tensor;

pub use error::{Error, Result};
