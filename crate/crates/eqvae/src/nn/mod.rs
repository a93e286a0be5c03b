//! Minimal reverse-mode autodiff over `f64` arrays.
//!
//! Everything runs on the CPU, single-threaded and in a fixed evaluation
//! order, so identical seeds give bit-identical runs. One [`tape::Tape`]
//! is built per sample per step; parameters live in a [`params::Params`]
//! registry that outlives tapes and feeds [`adam::Adam`].

pub mod adam;
pub mod layers;
pub mod params;
pub mod rng;
pub mod tape;

pub use adam::Adam;
pub use params::{PRef, Params};
pub use tape::{GradSet, Tape, Var};
