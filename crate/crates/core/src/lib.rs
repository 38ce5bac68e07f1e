//! Language-driven resamplable continuous representation for purifying
//! adversarially perturbed tracking inputs.
//!
//! The crate is `no_std` with `alloc`. Everything here is pure computation:
//! the reverse-mode engine in [`numerics`], the networks in [`nets`], the
//! spatial-temporal implicit representation in [`stir`], language-guided
//! resampling in [`resampler`], plus the toy victim tracker, gradient attacks,
//! synthetic data and training loops needed to exercise them end to end.
//! File formats, timing and the command line live in the `lrr` crate.
//!
//! Coordinate conventions: images are row-major `H x W x 3` tensors with
//! values in `[0, 1]`. A continuous query `(x, y, tau)` uses `x` for the row
//! and `y` for the column, both in pixel units, and `tau` in frame units.

#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod attacks;
pub mod checks;
pub mod datagen;
mod error;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod numerics;
pub mod resampler;
pub mod rng;
pub mod stir;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
