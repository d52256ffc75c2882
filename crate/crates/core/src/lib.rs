//! Adaptively robust sketches for resettable streams.
//!
//! A resettable stream carries nonnegative increments `Inc(x, Δ)` and resets
//! that zero a key's value. This crate provides sampling sketches for
//! cardinality, sum and Bernstein statistics over such streams, the binary
//! tree mechanism used to protect their released estimates against adaptive
//! inputs, adversaries that exploit the unprotected estimators, and an
//! experiment harness that compares estimates against an exact oracle.
//!
//! Logarithm conventions: `log2` is used wherever the quantity counts tree
//! levels or dyadic scales (`log^{3/2} T`, `log^{7/2} T`, the tree noise
//! scale); every other logarithm (`log(T/δ)`, `log(1/δ)`) is natural.

// Negated comparisons are used on purpose so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod bernstein;
pub mod cardinality;
mod error;
pub mod harness;
pub mod randomness;
pub mod sketch;
pub mod stream;
pub mod sum;
pub mod tree;

pub use error::{Result, SketchError};
pub use randomness::{NoiseMode, RandomSource, RngSeed};
pub use sketch::{Diagnostics, Sketch};
pub use stream::{ExactTracker, Key, Predicate, StatisticKind, UpdateOp};
