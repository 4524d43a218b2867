//! Node agent of the evaluation toolkit.
//!
//! An agent owns one evaluation environment at a time. The manager drives
//! it over a line-oriented JSON protocol ([`protocol`]); the test runner
//! ([`runner`]) sequences the hook invocations of a test plan across the
//! agents of all roles.

pub mod agent;
pub mod archive;
pub mod protocol;
pub mod runner;
pub mod tap;

pub use agent::{serve, spawn_local, Agent, AgentOptions};
pub use protocol::{AgentClient, ClientError, HookResult, Invocation, Reply, Request, TeardownSummary};
pub use runner::{check_renderable, run_plan, Nodes, RunError, RunLog};
