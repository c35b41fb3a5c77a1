//! Core algorithms for example-guided stochastic sequence prediction:
//! reverse-mode differentiation, synthetic multi-modal dynamics, motion
//! feature disentangling, nearest-neighbour example retrieval, the
//! stochastic-process predictor, variational baselines, and evaluation
//! metrics. IO, file formats, and the CLI live in the companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod disentangle;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod graph;
pub mod layers;
#[cfg(any(test, feature = "testkit"))]
pub mod oracle;
pub mod params;
pub mod predictor;
pub mod retrieval;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
