//! Sparse top-1 mixture-of-experts controllers for continuous control.
//!
//! The actor is a linear router that picks exactly one linear Gaussian expert
//! per state. It is trained with soft actor-critic plus two load-balancing
//! penalties, and afterwards the router can be distilled into shallow
//! decision trees and read off as per-expert linear equations.
//!
//! This crate is `no_std` (it needs `alloc`). File formats, the experiment
//! harness and the command-line tool live in the `topmoe` crate.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod balancing;
pub mod distill;
pub mod envs;
pub mod eval;
pub mod interpret;
pub mod policy;
pub mod rng;
pub mod sac;

pub use autodiff::{AutodiffError, Tensor};
pub use policy::{GateDecision, PolicyParams};
