//! Agent control protocol: one JSON object per line, request then reply,
//! over a TCP connection.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use comet_core::{NodeRole, TestKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One hook invocation with its runtime variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub hook: String,
    #[serde(default)]
    pub peer_addr: String,
    #[serde(default)]
    pub payload_size: u64,
    #[serde(default)]
    pub bundle_count: u64,
    /// Append the rows the hook wrote to `RESULT_PATH` to this test's
    /// record file once it exits successfully.
    #[serde(default)]
    pub record: Option<TestKind>,
}

impl Invocation {
    pub fn new(hook: &str) -> Self {
        Self {
            hook: hook.to_string(),
            peer_addr: String::new(),
            payload_size: 0,
            bundle_count: 0,
            record: None,
        }
    }

    pub fn peer(mut self, addr: &str) -> Self {
        self.peer_addr = addr.to_string();
        self
    }

    pub fn sized(mut self, payload_size: u64, bundle_count: u64) -> Self {
        self.payload_size = payload_size;
        self.bundle_count = bundle_count;
        self
    }

    pub fn recording(mut self, kind: TestKind) -> Self {
        self.record = Some(kind);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello,
    /// Verify the archive previously placed in the agent's incoming
    /// directory and stage it for `job`.
    Prepare {
        job: String,
        role: NodeRole,
        archive: String,
        sha256: String,
        /// Host the implementation's CL port binds to.
        host: String,
    },
    /// Launch the implementation and start resource sampling.
    Start { sample_interval_ms: u64 },
    Run { invocation: Invocation, timeout_ms: u64 },
    Spawn { invocation: Invocation },
    Join { id: u64, timeout_ms: u64, kill: bool },
    /// Current length of the implementation's timing log.
    TimingMark,
    /// Turn timing-log entries written after `from` into retention records,
    /// keeping bundles whose first event is at or after `since_ns`.
    Retention {
        from: u64,
        since_ns: u64,
        payload_size: u64,
        expected: u64,
        timeout_ms: u64,
    },
    /// Start frame taps in front of the implementation's ingress and egress.
    TapStart { egress_target: String },
    /// Turn tapped frames since the last call into retention records.
    TapRetention { payload_size: u64, expected: u64, timeout_ms: u64 },
    TapStop,
    Teardown,
    /// Stop the agent process.
    Exit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookResult {
    pub code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub elapsed_ms: u64,
    /// Rows appended to the record file, when recording.
    pub rows: u64,
}

impl HookResult {
    pub fn success(&self) -> bool {
        self.code == Some(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeardownSummary {
    pub terminated: Vec<i32>,
    pub escalated: bool,
    pub unkillable: Vec<i32>,
    pub staging_removed: bool,
    pub results_dir: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum Reply {
    Hello { version: u32, root: String, incoming: String },
    Prepared { results_dir: String, warnings: Vec<String> },
    Started { cl_addr: String, warnings: Vec<String> },
    Finished { result: HookResult },
    Spawned { id: u64, stdout: String },
    Mark { offset: u64, t_ns: u64 },
    Records { rows: u64 },
    Taps { ingress: String, egress: String },
    TornDown { summary: TeardownSummary },
    Done,
    Error { message: String },
}

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("agent {addr}: {source}")]
    Io { addr: String, source: io::Error },
    #[error("agent {addr} closed the connection")]
    Closed { addr: String },
    #[error("agent {addr} sent an invalid reply: {message}")]
    Protocol { addr: String, message: String },
    #[error("{0}")]
    Agent(String),
}

/// Blocking client for one agent.
pub struct AgentClient {
    addr: String,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl AgentClient {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, ClientError> {
        let io_err = |source| ClientError::Io {
            addr: addr.to_string(),
            source,
        };
        let mut last = io::Error::new(io::ErrorKind::NotFound, "address did not resolve");
        for sa in addr.to_socket_addrs().map_err(io_err)? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(s) => {
                    s.set_nodelay(true).map_err(io_err)?;
                    let writer = s.try_clone().map_err(io_err)?;
                    return Ok(Self {
                        addr: addr.to_string(),
                        reader: BufReader::new(s),
                        writer,
                    });
                }
                Err(e) => last = e,
            }
        }
        Err(io_err(last))
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Sends `req` and waits for the reply. Agent-side failures come back
    /// as [`ClientError::Agent`].
    pub fn call(&mut self, req: &Request) -> Result<Reply, ClientError> {
        let io_err = |source| ClientError::Io {
            addr: self.addr.clone(),
            source,
        };
        let mut line = serde_json::to_string(req).expect("request serializes");
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(io_err)?;
        let mut buf = String::new();
        let n = self.reader.read_line(&mut buf).map_err(|source| ClientError::Io {
            addr: self.addr.clone(),
            source,
        })?;
        if n == 0 {
            return Err(ClientError::Closed {
                addr: self.addr.clone(),
            });
        }
        match serde_json::from_str(&buf) {
            Ok(Reply::Error { message }) => Err(ClientError::Agent(message)),
            Ok(r) => Ok(r),
            Err(e) => Err(ClientError::Protocol {
                addr: self.addr.clone(),
                message: e.to_string(),
            }),
        }
    }
}

/// Reads one request line; `None` on EOF.
pub fn read_request(r: &mut impl BufRead) -> io::Result<Option<Result<Request, String>>> {
    let mut buf = String::new();
    if r.read_line(&mut buf)? == 0 {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&buf).map_err(|e| e.to_string())))
}

pub fn write_reply(w: &mut impl Write, reply: &Reply) -> io::Result<()> {
    let mut line = serde_json::to_string(reply).expect("reply serializes");
    line.push('\n');
    w.write_all(line.as_bytes())?;
    w.flush()
}
