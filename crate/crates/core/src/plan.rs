//! Test plans and node descriptors submitted with an evaluation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Rtt,
    Goodput,
    Brt,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::Rtt => "rtt",
            TestKind::Goodput => "goodput",
            TestKind::Brt => "brt",
        }
    }

    /// Name of the record file this test produces in the results directory.
    pub fn record_file(self) -> &'static str {
        match self {
            TestKind::Rtt => "rtt.csv",
            TestKind::Goodput => "goodput.csv",
            TestKind::Brt => "brt.csv",
        }
    }

    pub fn required_roles(self) -> &'static [NodeRole] {
        match self {
            TestKind::Rtt | TestKind::Goodput => &[NodeRole::Sender, NodeRole::Receiver],
            TestKind::Brt => &[NodeRole::Sender, NodeRole::Receiver, NodeRole::Relay],
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSpec {
    pub kind: TestKind,
    pub bundle_count: u64,
    pub payload_sizes: Vec<u64>,
    #[serde(default)]
    pub warmup_count: u64,
    /// Independent runs per payload size. Goodput confidence intervals are
    /// computed over the per-run means, so they need at least two.
    #[serde(default = "one")]
    pub repetitions: u32,
}

impl TestSpec {
    pub fn new(kind: TestKind, bundle_count: u64, payload_sizes: Vec<u64>) -> Self {
        Self {
            kind,
            bundle_count,
            payload_sizes,
            warmup_count: 0,
            repetitions: 1,
        }
    }

    pub fn with_warmup(mut self, warmup_count: u64) -> Self {
        self.warmup_count = warmup_count;
        self
    }

    pub fn with_repetitions(mut self, repetitions: u32) -> Self {
        self.repetitions = repetitions;
        self
    }
}

pub const DEFAULT_SAMPLE_INTERVAL_MS: u64 = 100;

fn default_interval() -> u64 {
    DEFAULT_SAMPLE_INTERVAL_MS
}

/// Default goodput/BRT payload sweep in bytes.
pub const DEFAULT_PAYLOAD_SWEEP: [u64; 6] = [1_000, 10_000, 50_000, 100_000, 500_000, 1_000_000];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPlan {
    pub tests: Vec<TestSpec>,
    /// Resource sampling interval; 0 disables sampling.
    #[serde(default = "default_interval")]
    pub sample_interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("invalid test plan: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("invalid node set: {}", .0.join("; "))]
    Nodes(Vec<String>),
}

impl TestPlan {
    pub fn new(tests: Vec<TestSpec>) -> Self {
        Self {
            tests,
            sample_interval_ms: DEFAULT_SAMPLE_INTERVAL_MS,
        }
    }

    /// Every violated plan invariant, in test order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.tests.is_empty() {
            out.push("plan contains no tests".to_string());
        }
        for (i, t) in self.tests.iter().enumerate() {
            let kind = t.kind;
            match kind {
                TestKind::Rtt if t.payload_sizes.len() != 1 => {
                    out.push(format!("test {i}: rtt requires exactly one payload size"))
                }
                TestKind::Goodput | TestKind::Brt if t.payload_sizes.is_empty() => {
                    out.push(format!("test {i}: {kind} requires ≥1 payload size"))
                }
                _ => {}
            }
            if t.bundle_count < 1 {
                out.push(format!("test {i}: {kind} bundle_count must be ≥ 1"));
            }
            if t.repetitions < 1 {
                out.push(format!("test {i}: {kind} repetitions must be ≥ 1"));
            }
            if t.payload_sizes.iter().any(|&s| s == 0) {
                out.push(format!("test {i}: {kind} payload sizes must be strictly positive"));
            }
            if t.payload_sizes.windows(2).any(|w| w[0] >= w[1]) {
                out.push(format!("test {i}: {kind} payload sizes must be strictly increasing"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(PlanError::Invalid(v))
        }
    }

    pub fn required_roles(&self) -> BTreeSet<NodeRole> {
        self.tests
            .iter()
            .flat_map(|t| t.kind.required_roles().iter().copied())
            .collect()
    }

    /// Checks that `nodes` assigns every role the plan needs, once.
    pub fn check_nodes(&self, nodes: &[NodeDescriptor]) -> Result<(), PlanError> {
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        for n in nodes {
            if !seen.insert(n.role) {
                problems.push(format!("role {} assigned more than once", n.role));
            }
        }
        for role in self.required_roles() {
            if !seen.contains(&role) {
                let needed_by: Vec<&str> = self
                    .tests
                    .iter()
                    .filter(|t| t.kind.required_roles().contains(&role))
                    .map(|t| t.kind.as_str())
                    .collect();
                problems.push(format!(
                    "plan requires a {role} node (needed by {})",
                    needed_by.join(", ")
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PlanError::Nodes(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Sender,
    Receiver,
    Relay,
}

impl NodeRole {
    pub const ALL: [NodeRole; 3] = [NodeRole::Sender, NodeRole::Receiver, NodeRole::Relay];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Sender => "sender",
            NodeRole::Receiver => "receiver",
            NodeRole::Relay => "relay",
        }
    }

    pub fn resources_file(self) -> String {
        format!("resources_{}.csv", self.as_str())
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NodeRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sender" => Ok(NodeRole::Sender),
            "receiver" => Ok(NodeRole::Receiver),
            "relay" => Ok(NodeRole::Relay),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    LocalExec,
    SecureCopy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub role: NodeRole,
    /// Agent control endpoint, `host:port`. Secure copy also accepts
    /// `user@host:port`.
    pub address: String,
    pub transport: Transport,
}

impl NodeDescriptor {
    pub fn local(role: NodeRole, address: impl Into<String>) -> Self {
        Self {
            role,
            address: address.into(),
            transport: Transport::LocalExec,
        }
    }

    /// `host` and optional `user` parts of the address.
    pub fn ssh_target(&self) -> &str {
        self.address.rsplit_once(':').map_or(&self.address, |(h, _)| h)
    }

    /// `host:port` of the agent's control socket.
    pub fn control_addr(&self) -> &str {
        self.address.rsplit_once('@').map_or(&self.address, |(_, a)| a)
    }

    pub fn host(&self) -> &str {
        let t = self.ssh_target();
        t.rsplit_once('@').map_or(t, |(_, h)| h)
    }
}
