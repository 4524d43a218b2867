//! Test runner: executes a plan's tests in order across the agents of all
//! roles.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use comet_core::template::{render, BUILTIN_TEMPLATES};
use comet_core::{AdapterConfig, NodeRole, RuntimeVars, TestKind, TestPlan, TestSpec};
use thiserror::Error;

use crate::protocol::{AgentClient, ClientError, HookResult, Invocation, Reply, Request};

/// Per-bundle allowance on top of a fixed minute for hooks that move
/// `count` bundles.
const PER_BUNDLE: Duration = Duration::from_millis(100);
const RECORD_TIMEOUT: Duration = Duration::from_secs(30);
/// Quiet time after each paced bundle, long enough for the relay to
/// forward it before the next sender process is spawned.
const PACING_GAP: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{kind} test failed: {message}")]
    Test { kind: TestKind, message: String },
    #[error("{role} node: {source}")]
    Node { role: NodeRole, source: ClientError },
    #[error("{0}")]
    Setup(String),
}

/// Timestamped `run.log` writer.
pub struct RunLog {
    file: File,
    t0: Instant,
}

impl RunLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        Ok(Self {
            file: OpenOptions::new().create(true).append(true).open(path)?,
            t0: Instant::now(),
        })
    }

    pub fn line(&mut self, text: &str) {
        let t = self.t0.elapsed();
        let _ = writeln!(self.file, "[{:>9.3}s] {text}", t.as_secs_f64());
        let _ = self.file.flush();
    }
}

/// Agent connections keyed by role.
pub type Nodes = BTreeMap<NodeRole, AgentClient>;

fn hook_timeout(count: u64) -> Duration {
    Duration::from_secs(60) + PER_BUNDLE * count.min(u32::MAX as u64) as u32
}

/// Renders every hook invocation the plan will make, so a bad adapter
/// fails before any test starts.
pub fn check_renderable(config: &AdapterConfig, plan: &TestPlan) -> Result<usize, RunError> {
    let mut n = 0;
    let mut try_render = |role: NodeRole, hook: &str, size: u64, count: u64| -> Result<(), RunError> {
        let t = BUILTIN_TEMPLATES
            .iter()
            .find(|t| t.hook == hook)
            .ok_or_else(|| RunError::Setup(format!("no built-in script for hook {hook}")))?;
        let vars = RuntimeVars {
            local_addr: "127.0.0.1:1".into(),
            peer_addr: "127.0.0.1:2".into(),
            payload_size: size,
            bundle_count: count,
            result_path: "result.csv".into(),
            ..RuntimeVars::new(role)
        };
        render(t.id, t.text, config, &vars).map_err(|e| RunError::Setup(format!("{hook} for {role}: {e}")))?;
        n += 1;
        Ok(())
    };
    for role in plan.required_roles() {
        for hook in ["start_node", "configure_contact", "shutdown"] {
            try_render(role, hook, 0, 0)?;
        }
    }
    for t in &plan.tests {
        for &size in &t.payload_sizes {
            for count in [t.warmup_count, t.bundle_count, 1] {
                match t.kind {
                    TestKind::Rtt => {
                        try_render(NodeRole::Sender, "ping_app", size, count)?;
                        try_render(NodeRole::Receiver, "exchange_variable_app", size, count)?;
                    }
                    TestKind::Goodput | TestKind::Brt => {
                        try_render(NodeRole::Sender, "send_fixed_app", size, count)?;
                        try_render(NodeRole::Receiver, "recv_goodput_app", size, count)?;
                    }
                }
            }
        }
    }
    Ok(n)
}

struct Runner<'a> {
    nodes: &'a mut Nodes,
    cl: BTreeMap<NodeRole, String>,
    log: &'a mut RunLog,
    has_timing_log: bool,
}

impl Runner<'_> {
    fn call(&mut self, role: NodeRole, req: &Request) -> Result<Reply, RunError> {
        let node = self
            .nodes
            .get_mut(&role)
            .ok_or_else(|| RunError::Setup(format!("no {role} node")))?;
        node.call(req).map_err(|source| RunError::Node { role, source })
    }

    fn cl(&self, role: NodeRole) -> String {
        self.cl.get(&role).cloned().unwrap_or_default()
    }

    fn test_err(kind: TestKind) -> impl Fn(RunError) -> RunError {
        move |e| match e {
            RunError::Node {
                source: ClientError::Agent(message),
                role,
            } => RunError::Test {
                kind,
                message: format!("{role}: {message}"),
            },
            other => other,
        }
    }

    fn finished(kind: TestKind, role: NodeRole, reply: Reply, hook: &str) -> Result<HookResult, RunError> {
        let result = match reply {
            Reply::Finished { result } => result,
            other => {
                return Err(RunError::Setup(format!("unexpected reply {other:?}")));
            }
        };
        if !result.success() {
            let stderr = result.stderr.trim();
            return Err(RunError::Test {
                kind,
                message: format!(
                    "{role} {hook} exited with {}{}",
                    result.code.map_or("a signal".to_string(), |c| format!("status {c}")),
                    if stderr.is_empty() { String::new() } else { format!(": {stderr}") }
                ),
            });
        }
        Ok(result)
    }

    fn run(&mut self, kind: TestKind, role: NodeRole, inv: Invocation) -> Result<HookResult, RunError> {
        let hook = inv.hook.clone();
        let timeout = hook_timeout(inv.bundle_count);
        let reply = self
            .call(
                role,
                &Request::Run {
                    invocation: inv,
                    timeout_ms: timeout.as_millis() as u64,
                },
            )
            .map_err(Self::test_err(kind))?;
        Self::finished(kind, role, reply, &hook)
    }

    fn spawn(&mut self, kind: TestKind, role: NodeRole, inv: Invocation) -> Result<u64, RunError> {
        match self
            .call(role, &Request::Spawn { invocation: inv })
            .map_err(Self::test_err(kind))?
        {
            Reply::Spawned { id, .. } => Ok(id),
            other => Err(RunError::Setup(format!("unexpected reply {other:?}"))),
        }
    }

    fn join(&mut self, kind: TestKind, role: NodeRole, id: u64, hook: &str, timeout: Duration, kill: bool) -> Result<HookResult, RunError> {
        let reply = self
            .call(
                role,
                &Request::Join {
                    id,
                    timeout_ms: timeout.as_millis() as u64,
                    kill,
                },
            )
            .map_err(Self::test_err(kind))?;
        if kill {
            return match reply {
                Reply::Finished { result } => Ok(result),
                other => Err(RunError::Setup(format!("unexpected reply {other:?}"))),
            };
        }
        Self::finished(kind, role, reply, hook)
    }

    fn contact(&mut self, kind: TestKind, role: NodeRole, peer: &str) -> Result<(), RunError> {
        self.run(kind, role, Invocation::new("configure_contact").peer(peer))?;
        self.log.line(&format!("{role}: contact to {peer}"));
        Ok(())
    }

    fn rtt(&mut self, t: &TestSpec) -> Result<(), RunError> {
        let kind = TestKind::Rtt;
        let size = t.payload_sizes[0];
        let (tx, rx) = (self.cl(NodeRole::Sender), self.cl(NodeRole::Receiver));
        self.contact(kind, NodeRole::Sender, &rx)?;
        self.contact(kind, NodeRole::Receiver, &tx)?;
        let echo = self.spawn(kind, NodeRole::Receiver, Invocation::new("exchange_variable_app").peer(&tx).sized(size, t.bundle_count))?;
        let outcome = (|| {
            let ping = |n| Invocation::new("ping_app").peer(&rx).sized(size, n);
            if t.warmup_count > 0 {
                self.run(kind, NodeRole::Sender, ping(t.warmup_count))?;
                self.log.line(&format!("rtt warmup: {} pings discarded", t.warmup_count));
            }
            for rep in 0..t.repetitions {
                let r = self.run(kind, NodeRole::Sender, ping(t.bundle_count).recording(kind))?;
                self.log.line(&format!(
                    "rtt run {}: {} records, {} B payload ({})",
                    rep + 1,
                    r.rows,
                    size,
                    r.stdout.trim()
                ));
            }
            Ok(())
        })();
        let stopped = self.join(kind, NodeRole::Receiver, echo, "exchange_variable_app", Duration::ZERO, true);
        outcome.and(stopped.map(|_| ()))
    }

    /// One receiver-first transfer of `count` bundles. Returns the
    /// receiver's result.
    fn transfer(&mut self, kind: TestKind, dest: &str, size: u64, count: u64, record: bool) -> Result<HookResult, RunError> {
        let mut recv = Invocation::new("recv_goodput_app").sized(size, count);
        if record {
            recv = recv.recording(kind);
        }
        let id = self.spawn(kind, NodeRole::Receiver, recv)?;
        let sent = self.run(
            kind,
            NodeRole::Sender,
            Invocation::new("send_fixed_app").peer(dest).sized(size, count),
        );
        if let Err(e) = sent {
            let _ = self.join(kind, NodeRole::Receiver, id, "recv_goodput_app", Duration::ZERO, true);
            return Err(e);
        }
        self.join(kind, NodeRole::Receiver, id, "recv_goodput_app", hook_timeout(count), false)
    }

    /// Like `transfer`, but the sender hands over one bundle per invocation
    /// and waits, so each bundle meets an idle relay instead of a queue.
    fn paced_transfer(&mut self, kind: TestKind, dest: &str, size: u64, count: u64) -> Result<HookResult, RunError> {
        let id = self.spawn(kind, NodeRole::Receiver, Invocation::new("recv_goodput_app").sized(size, count))?;
        for _ in 0..count {
            let sent = self.run(kind, NodeRole::Sender, Invocation::new("send_fixed_app").peer(dest).sized(size, 1));
            if let Err(e) = sent {
                let _ = self.join(kind, NodeRole::Receiver, id, "recv_goodput_app", Duration::ZERO, true);
                return Err(e);
            }
            thread::sleep(PACING_GAP);
        }
        self.join(kind, NodeRole::Receiver, id, "recv_goodput_app", hook_timeout(count), false)
    }

    fn goodput(&mut self, t: &TestSpec) -> Result<(), RunError> {
        let kind = TestKind::Goodput;
        let rx = self.cl(NodeRole::Receiver);
        self.contact(kind, NodeRole::Sender, &rx)?;
        for &size in &t.payload_sizes {
            if t.warmup_count > 0 {
                self.transfer(kind, &rx, size, t.warmup_count, false)?;
                self.log.line(&format!("goodput warmup {size} B: {} bundles discarded", t.warmup_count));
            }
            for rep in 0..t.repetitions {
                let r = self.transfer(kind, &rx, size, t.bundle_count, true)?;
                self.log.line(&format!("goodput {size} B run {}: {}", rep + 1, r.stdout.trim().replace('\n', "; ")));
                if r.stdout.contains("loss") {
                    self.log.line(&format!("goodput {size} B run {}: loss flagged", rep + 1));
                }
            }
        }
        Ok(())
    }

    fn brt(&mut self, t: &TestSpec) -> Result<(), RunError> {
        let kind = TestKind::Brt;
        let relay = self.cl(NodeRole::Relay);
        let rx = self.cl(NodeRole::Receiver);
        let (ingress, egress) = if self.has_timing_log {
            (relay.clone(), rx.clone())
        } else {
            match self
                .call(NodeRole::Relay, &Request::TapStart { egress_target: rx.clone() })
                .map_err(Self::test_err(kind))?
            {
                Reply::Taps { ingress, egress } => {
                    self.log.line(&format!("brt: boundary taps ingress {ingress} egress {egress}"));
                    (ingress, egress)
                }
                other => return Err(RunError::Setup(format!("unexpected reply {other:?}"))),
            }
        };
        self.contact(kind, NodeRole::Relay, &egress)?;
        self.contact(kind, NodeRole::Sender, &ingress)?;
        let outcome = (|| {
            for &size in &t.payload_sizes {
                if t.warmup_count > 0 {
                    self.transfer(kind, &ingress, size, t.warmup_count, false)?;
                    if !self.has_timing_log {
                        self.tap_records(size, 0)?;
                    }
                    self.log.line(&format!("brt warmup {size} B: {} bundles discarded", t.warmup_count));
                }
                for rep in 0..t.repetitions {
                    let (mark, since_ns) = if self.has_timing_log {
                        match self.call(NodeRole::Relay, &Request::TimingMark).map_err(Self::test_err(kind))? {
                            Reply::Mark { offset, t_ns } => (offset, t_ns),
                            other => return Err(RunError::Setup(format!("unexpected reply {other:?}"))),
                        }
                    } else {
                        (0, 0)
                    };
                    self.paced_transfer(kind, &ingress, size, t.bundle_count)?;
                    let rows = if self.has_timing_log {
                        let req = Request::Retention {
                            from: mark,
                            since_ns,
                            payload_size: size,
                            expected: t.bundle_count,
                            timeout_ms: RECORD_TIMEOUT.as_millis() as u64,
                        };
                        match self.call(NodeRole::Relay, &req).map_err(Self::test_err(kind))? {
                            Reply::Records { rows } => rows,
                            other => return Err(RunError::Setup(format!("unexpected reply {other:?}"))),
                        }
                    } else {
                        self.tap_records(size, t.bundle_count)?
                    };
                    self.log.line(&format!("brt {size} B run {}: {rows} retention records", rep + 1));
                }
            }
            Ok(())
        })();
        if !self.has_timing_log {
            let _ = self.call(NodeRole::Relay, &Request::TapStop);
        }
        outcome
    }

    fn tap_records(&mut self, size: u64, expected: u64) -> Result<u64, RunError> {
        let req = Request::TapRetention {
            payload_size: size,
            expected,
            timeout_ms: RECORD_TIMEOUT.as_millis() as u64,
        };
        match self.call(NodeRole::Relay, &req).map_err(Self::test_err(TestKind::Brt))? {
            Reply::Records { rows } => Ok(rows),
            other => Err(RunError::Setup(format!("unexpected reply {other:?}"))),
        }
    }
}

/// Starts the implementation on every node, then runs the tests in plan
/// order. The first failing test aborts the rest; records already
/// written stay where they are.
pub fn run_plan(plan: &TestPlan, config: &AdapterConfig, nodes: &mut Nodes, log: &mut RunLog) -> Result<(), RunError> {
    let rendered = check_renderable(config, plan)?;
    log.line(&format!("{rendered} hook invocations render cleanly"));
    let mut runner = Runner {
        nodes,
        cl: BTreeMap::new(),
        log,
        has_timing_log: config.timing_log.is_some(),
    };
    let roles: Vec<NodeRole> = runner.nodes.keys().copied().collect();
    for role in roles {
        let reply = runner.call(
            role,
            &Request::Start {
                sample_interval_ms: plan.sample_interval_ms,
            },
        )?;
        match reply {
            Reply::Started { cl_addr, warnings } => {
                for w in warnings {
                    runner.log.line(&format!("{role}: warning: {w}"));
                }
                runner.log.line(&format!("{role}: implementation ready on {cl_addr}"));
                runner.cl.insert(role, cl_addr);
            }
            other => return Err(RunError::Setup(format!("unexpected reply {other:?}"))),
        }
    }
    for (i, t) in plan.tests.iter().enumerate() {
        runner.log.line(&format!(
            "test {i} {}: start ({} bundles, sizes {:?}, warmup {}, repetitions {})",
            t.kind, t.bundle_count, t.payload_sizes, t.warmup_count, t.repetitions
        ));
        let outcome = match t.kind {
            TestKind::Rtt => runner.rtt(t),
            TestKind::Goodput => runner.goodput(t),
            TestKind::Brt => runner.brt(t),
        };
        match outcome {
            Ok(()) => runner.log.line(&format!("test {i} {}: done", t.kind)),
            Err(e) => {
                runner.log.line(&format!("test {i} {}: FAILED: {e}", t.kind));
                runner.log.line("remaining tests skipped");
                return Err(e);
            }
        }
    }
    Ok(())
}
