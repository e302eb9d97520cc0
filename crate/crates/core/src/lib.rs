#![cfg_attr(not(feature = "std"), no_std)]
//! Core of the one-step noise-inversion laboratory.
//!
//! Everything here is pure computation over in-memory buffers: the tensor
//! tape, the diffusion schedule and DDIM sampler, synthetic data and masks,
//! the four networks, all losses, the training loops and the inpainting
//! pipelines, and the evaluation metrics. File formats, timing and the CLI
//! live in the `noiseinv` crate.
//!
//! Without the `std` feature the crate is `no_std` (with `alloc`) and uses
//! `libm` for transcendental functions; with it, the platform math library.

extern crate alloc;

pub mod error;
pub mod num;

pub use error::{Error, Result};
pub mod schedule;
pub mod synth;
pub mod mask;
pub mod nets;
pub mod losses;
pub mod pipelines;
pub mod eval;
