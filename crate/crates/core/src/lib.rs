//! Multi-format contrastive audio representation learning.
//!
//! Two views of the same clip, typically a raw waveform crop and a log-mel
//! crop, are encoded by separate networks, mapped through a shared projection
//! head and pulled together with an NT-Xent objective. Frozen features are then
//! scored with a shallow MLP probe.
//!
//! This crate is `no_std` (with `alloc`) and holds every numeric piece of the
//! pipeline: signal synthesis, the DSP front end, augmentations, view
//! creation, a small reverse-mode autodiff engine, the encoders, the
//! contrastive trainer and the evaluation probe. File formats, configuration
//! parsing and the command line live in the `mfcl` crate.
//!
//! The `std` feature (on by default) only enables runtime SIMD detection in
//! the matrix multiply backend and `std` float intrinsics.

#![no_std]

extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod dsp;
pub mod encoders;
mod error;
pub mod gradcheck;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod views;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
