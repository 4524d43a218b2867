//! Evaluation jobs and their lifecycle.

use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use comet_core::{NodeDescriptor, TestPlan};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Provisioning,
    Running,
    Collecting,
    Done,
    Failed,
}

impl JobState {
    pub const ALL: [JobState; 6] = [
        JobState::Queued,
        JobState::Provisioning,
        JobState::Running,
        JobState::Collecting,
        JobState::Done,
        JobState::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    /// Holds the testbed: provisioning, running or collecting.
    pub fn is_active(self) -> bool {
        !self.is_terminal() && self != JobState::Queued
    }

    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        match (self, next) {
            (Queued, Provisioning) | (Provisioning, Running) | (Running, Collecting) | (Collecting, Done) => true,
            (from, Failed) => !from.is_terminal(),
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "QUEUED",
            JobState::Provisioning => "PROVISIONING",
            JobState::Running => "RUNNING",
            JobState::Collecting => "COLLECTING",
            JobState::Done => "DONE",
            JobState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: JobState,
    /// Unix time, milliseconds.
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationJob {
    pub id: String,
    pub seq: u64,
    pub sha256: String,
    pub archive_len: u64,
    pub plan: TestPlan,
    pub nodes: Vec<NodeDescriptor>,
    pub state: JobState,
    pub submitted_at_ms: u64,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub history: Vec<Transition>,
}

impl EvaluationJob {
    pub fn new(seq: u64, sha256: String, archive_len: u64, plan: TestPlan, nodes: Vec<NodeDescriptor>) -> Self {
        let now = now_ms();
        Self {
            id: format!("job-{seq}"),
            seq,
            sha256,
            archive_len,
            plan,
            nodes,
            state: JobState::Queued,
            submitted_at_ms: now,
            error: None,
            history: vec![Transition {
                state: JobState::Queued,
                at_ms: now,
            }],
        }
    }

    /// Moves to `next` if the lifecycle allows it.
    pub fn advance(&mut self, next: JobState) -> bool {
        if !self.state.can_become(next) {
            return false;
        }
        self.state = next;
        self.history.push(Transition {
            state: next,
            at_ms: now_ms(),
        });
        true
    }

    pub fn fail(&mut self, reason: impl Into<String>) -> bool {
        let ok = self.advance(JobState::Failed);
        if ok {
            self.error = Some(reason.into());
        }
        ok
    }

    pub fn finished_at_ms(&self) -> Option<u64> {
        self.history.iter().find(|t| t.state.is_terminal()).map(|t| t.at_ms)
    }
}
