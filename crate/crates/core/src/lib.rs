//! Solvers for Learning Parity with Noise: GF(2) linear algebra, problem
//! generation, a small MLP trainer and the classical baselines.

pub mod classic;
pub mod cli;
pub mod error;
pub mod gf2;
pub mod lpn;
pub mod nn;
pub mod pipelines;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
