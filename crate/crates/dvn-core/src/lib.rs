//! A training and inference engine for task-specific virtual networks over a
//! single shared parameter store.
//!
//! The store is partitioned into disjoint units (contiguous channel groups
//! across every body layer). Each task gets a virtual network: a fixed order
//! of units whose prefixes form nested levels of hierarchy, so one trained
//! model answers any task at any parameter budget by picking a level.
//!
//! Modules:
//! - [`tensor`] / [`tape`]: dense 64-bit tensors and a minimal reverse-mode
//!   differentiation tape with a finite-difference oracle.
//! - [`partition`]: units, the order-derivation rule, hierarchy masks.
//! - [`backbone`]: the physical network, parameter store, masked forward.
//! - [`trainer`]: joint, single-task, and sequential (distillation)
//!   objectives and loops.
//! - [`budget`]: parameter accounting, measured latency, level selection.
//! - [`data`]: synthetic task generators and the dataset file format.
//!
//! The `parallel` feature (default) backs the inner compute loops with
//! rayon; results are bitwise identical to the sequential fallback because
//! parallelism only ever splits independent output rows.

pub mod backbone;
pub mod budget;
pub mod data;
pub mod error;
pub mod kernels;
pub mod partition;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
