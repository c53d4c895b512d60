//! Engine for cooperative control of several diffusion models.
//!
//! Each agent is a pre-trained score model simulated as a controlled
//! reverse-time SDE. A fixed mask aggregator stitches the agents' states into
//! one composite sample, and per-agent control policies are trained by
//! backpropagating a Monte Carlo control objective through every
//! Euler-Maruyama step.
//!
//! The crate is `no_std` (with `alloc`); enable the `std` feature for
//! runtime-dispatched SIMD matrix kernels and `std::error::Error` impls.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod aggregation;
pub mod control;
pub mod costs;
pub mod diffgraph;
pub mod error;
pub mod experiment;
pub mod math;
pub mod noise;
pub mod optimize;
pub mod score;
pub mod sde;
pub mod shapes;

pub use error::{Error, Result};
