//! Desk-scale laboratory for hardware-conditioned model behavior.
//!
//! Real accelerators evaluate the same model with different reduction orders,
//! tiling and accumulator widths, so floating-point non-associativity makes
//! the "one" decision function a family of near-identical functions, one per
//! device. This crate reproduces that situation on a single machine:
//!
//! * [`numerics`] — kernels (sum, dot, GEMM, conv2d) whose rounding sequence
//!   is a pure function of the inputs and a [`BackendProfile`], the crate's
//!   stand-in for a hardware platform;
//! * [`engine`] — a small layer zoo with analytic gradients; forward runs
//!   under any profile, gradients always under the canonical wide profile;
//! * [`data`] — synthetic classification tasks and baseline training;
//! * [`attack`] — backdoor construction: boundary shaping plus refinement by
//!   product-preserving weight permutations and low-mantissa bit flips;
//! * [`analysis`] — cross-backend activation patching and per-layer traces;
//! * [`defense`] — input perturbation, batch-size variation, downcasting and
//!   fine-tuning countermeasures with their success metrics.
//!
//! Everything is bit-deterministic given the seeds and profiles involved;
//! with the `parallel` feature (default) the coarse-grained loops run on
//! rayon without changing a single output bit.

pub mod attack;
pub mod analysis;
pub mod data;
pub mod defense;
pub mod engine;
pub mod numerics;
pub mod parallel;

pub use engine::{Layer, Model};
pub use numerics::{Accumulator, BackendProfile, BatchTiling, Lane, ReductionTree, Tensor};
