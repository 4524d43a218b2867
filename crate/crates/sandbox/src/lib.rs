//! Evaluation environments on a node.
//!
//! An [`Environment`] owns a staging directory and every process started
//! for one evaluation. Processes are tagged with an environment variable
//! marker so teardown also finds daemons that left the process group.

pub mod env;
pub mod procfs;
pub mod sampler;

pub use env::{
    reclaim, Backend, EnvSpec, Environment, HookOutput, HookProcess, Limits, Network, SandboxError, TeardownReport,
    DEFAULT_READINESS_TIMEOUT,
};
pub use sampler::{Sampler, SamplerReport, DEFAULT_INTERVAL};
