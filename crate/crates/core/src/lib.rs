//! Equi-energy sampling as a non-linear Markov chain method.
//!
//! The crate provides the multi-chain sampler, the exact finite-state oracle
//! used to check it, and the experiment drivers behind the `eesampler` CLI.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod kernels;
pub mod measures;
pub mod oracle;
pub mod sampler;
pub mod state_space;
pub mod verify;

pub use error::{Error, Result};
pub use kernels::{Branch, KernelVariant, MixtureSpec, Model, Proposal, SwapRule};
pub use measures::{tv_distance, EmpiricalMeasure, StabilityMonitor};
pub use sampler::{run, run_frozen_feeder, ChainEnsemble, Freeze, RunSpec, SamplerSettings, Trace, UpdateOrder};
pub use state_space::{DensityLadder, LogDensity, RingPartition, State, StateSpace};
