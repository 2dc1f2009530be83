//! Channel-specific prototype networks for multi-channel raster classification.
//!
//! Every input channel is embedded by one shared convolutional encoder. Each
//! channel then owns its own bank of class prototypes; the maximum
//! (location-scaled) similarity to every prototype feeds a zero-bias softmax
//! head, so every prediction decomposes into per-prototype, per-channel
//! contributions.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, reports and the command line live in the companion
//! `protogrid` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod encoder;
mod error;
pub mod explain;
pub mod head;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod prototype;
mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
