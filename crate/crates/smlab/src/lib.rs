//! Score-matching laboratory.
//!
//! Five estimators of the score-matching objective — exact, sliced,
//! finite-difference sliced, denoising, and local curvature smoothing — built
//! on a tape-based automatic differentiation core whose backward pass is
//! itself recorded on the tape, so gradients of gradients come out of the
//! same machinery. Around the estimators: small MLP score and energy
//! networks, VE/sub-VP diffusion schedules with reverse-time and Langevin
//! samplers, two-dimensional densities with analytic scores for ground
//! truth, statistical validation checks, and a timing bench.
//!
//! The [`tensor`] module is the foundation; [`objectives`] contains the five
//! losses and their cross-identities; [`sde`], [`datasets`], and [`eval`]
//! supply the schedules, data, and checks; [`cli`] wires everything into the
//! `smlab` binary.

pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod net;
pub mod objectives;
pub mod rng;
pub mod sde;
pub mod tensor;

pub use error::{Error, Result};

/// Entry point used by the `smlab` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::main()
}
