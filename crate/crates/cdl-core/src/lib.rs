//! Deterministic desk-scale laboratory for continual distillation learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`adam`], [`gradcheck`]: a double-precision
//!   reverse-mode autodiff core with a fixed primitive set and the Adam
//!   optimizer. Every trainable quantity flows through it.
//! - [`vit`]: a small vision transformer with prefix-tuning insertion points,
//!   an optional distillation token, and classifier heads, plus the frozen
//!   backbone discipline and its audit helpers.
//! - [`pools`]: the three continual-learning prompt mechanisms (top-K
//!   key-query selection, general/expert placement, attended weighted
//!   composition) and their pool losses.
//! - [`distill`]: six distillation objectives and the combined student loss.
//! - [`data`], [`metrics`], [`harness`]: synthetic class-incremental streams,
//!   the per-task teacher-then-student loop, and the accuracy/forgetting
//!   metrics.
//! - [`weights`]: the CDLW weights file format (bit-exact round trips).

pub mod adam;
pub mod distill;
pub mod checksuite;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod pools;
pub mod tensor;
pub mod vit;
pub mod weights;

pub use error::{CdlError, Result};
pub use params::{ParamId, ParamStore};
pub use rng::SeededRng;
pub use tape::{GradMap, Tape, TensorId};
pub use tensor::Tensor;
