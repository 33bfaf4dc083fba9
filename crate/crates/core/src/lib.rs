//! Feature adaptation for low-resolution face recognition: synthetic data,
//! networks with hand-written adjoints, staged training and evaluation.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod runner;
pub mod trainer;

pub use error::{FanError, Result};
pub use exec::Exec;
