//! Job queue and the single dispatcher that runs jobs one at a time.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use comet_agent::archive::{read_config, sha256_hex};
use comet_agent::{run_plan, AgentClient, Nodes, Reply, Request, RunLog};
use comet_core::clock::monotonic_ns;
use comet_core::records::read_csv;
use comet_core::report::{emit_results, ResultSet};
use comet_core::template::validate_config;
use comet_core::{AdapterConfig, NodeDescriptor, NodeRole, PlanError, TestPlan};
use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::job::{EvaluationJob, JobState};
use crate::journal::Journal;
use crate::transport::Delivery;

#[derive(Debug, Clone)]
pub struct ManagerOptions {
    pub root: PathBuf,
    /// Used when a submission names no nodes.
    pub default_nodes: Vec<NodeDescriptor>,
    pub connect_timeout: Duration,
    pub delivery: Delivery,
}

impl ManagerOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            delivery: Delivery::new(root.join("outgoing")),
            root,
            default_nodes: Vec::new(),
            connect_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("archive is empty")]
    EmptyArchive,
    #[error("archive rejected: {0}")]
    Archive(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("journal: {0}")]
    Io(#[from] io::Error),
}

impl SubmitError {
    /// One entry per violated requirement.
    pub fn violations(&self) -> Vec<String> {
        match self {
            SubmitError::Plan(PlanError::Invalid(v) | PlanError::Nodes(v)) => v.clone(),
            other => vec![other.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One state change, timestamped on the monotonic clock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub t_ns: u64,
    pub job: String,
    pub state: JobState,
}

struct Inner {
    jobs: BTreeMap<u64, EvaluationJob>,
    queue: VecDeque<u64>,
    next_seq: u64,
    cleanup_block: Option<String>,
    stopping: bool,
    trace: Vec<Observation>,
}

struct Shared {
    opts: ManagerOptions,
    journal: Journal,
    inner: Mutex<Inner>,
    changed: Condvar,
}

/// Handle to the queue. Clones share one dispatcher.
#[derive(Clone)]
pub struct Manager {
    shared: Arc<Shared>,
}

fn seq_of(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

impl Manager {
    /// Loads the journal, fails jobs a previous manager left mid-run,
    /// requeues the rest and starts the dispatcher.
    pub fn start(mut opts: ManagerOptions) -> io::Result<Self> {
        opts.root = std::path::absolute(&opts.root)?;
        let journal = Journal::open(opts.root.join("jobs"))?;
        fs::create_dir_all(opts.root.join("results").join("partial"))?;
        let mut inner = Inner {
            jobs: BTreeMap::new(),
            queue: VecDeque::new(),
            next_seq: 1,
            cleanup_block: None,
            stopping: false,
            trace: Vec::new(),
        };
        for mut job in journal.load()? {
            inner.next_seq = inner.next_seq.max(job.seq + 1);
            if job.state.is_active() {
                let was = job.state;
                job.fail(format!("manager restarted while the job was {was}"));
                journal.save(&job)?;
                move_to_partial(&opts.root, &job.id);
                journal.release_archive(&job.id);
            }
            if job.state == JobState::Queued {
                inner.queue.push_back(job.seq);
            }
            inner.jobs.insert(job.seq, job);
        }
        let shared = Arc::new(Shared {
            opts,
            journal,
            inner: Mutex::new(inner),
            changed: Condvar::new(),
        });
        let worker = Arc::clone(&shared);
        thread::Builder::new()
            .name("dispatcher".into())
            .spawn(move || dispatcher(&worker))?;
        Ok(Self { shared })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.shared.inner.lock().expect("manager lock")
    }

    pub fn root(&self) -> &Path {
        &self.shared.opts.root
    }

    pub fn submit(
        &self,
        archive: Vec<u8>,
        plan: TestPlan,
        nodes: Option<Vec<NodeDescriptor>>,
    ) -> Result<String, SubmitError> {
        let nodes = nodes.unwrap_or_else(|| self.shared.opts.default_nodes.clone());
        let mut problems = plan.violations();
        if let Err(PlanError::Nodes(v)) = plan.check_nodes(&nodes) {
            problems.extend(v);
        }
        if !problems.is_empty() {
            return Err(SubmitError::Plan(PlanError::Invalid(problems)));
        }
        if archive.is_empty() {
            return Err(SubmitError::EmptyArchive);
        }
        let text = read_config(&archive).map_err(|e| SubmitError::Archive(e.to_string()))?;
        validate_config(&text).map_err(|e| SubmitError::Archive(e.to_string()))?;

        let mut inner = self.lock();
        let seq = inner.next_seq;
        let job = EvaluationJob::new(seq, sha256_hex(&archive), archive.len() as u64, plan, nodes);
        self.shared.journal.create(&job, &archive)?;
        inner.next_seq += 1;
        let id = job.id.clone();
        inner.trace.push(Observation {
            t_ns: monotonic_ns(),
            job: id.clone(),
            state: JobState::Queued,
        });
        inner.jobs.insert(seq, job);
        inner.queue.push_back(seq);
        self.shared.changed.notify_all();
        info!("{id} queued");
        Ok(id)
    }

    pub fn status(&self, id: &str) -> Option<JobStatus> {
        let seq = seq_of(id)?;
        let inner = self.lock();
        let job = inner.jobs.get(&seq)?;
        Some(JobStatus {
            id: job.id.clone(),
            state: job.state,
            position: inner.queue.iter().position(|&s| s == seq),
            error: job.error.clone(),
        })
    }

    pub fn job(&self, id: &str) -> Option<EvaluationJob> {
        self.lock().jobs.get(&seq_of(id)?).cloned()
    }

    pub fn jobs(&self) -> Vec<EvaluationJob> {
        self.lock().jobs.values().cloned().collect()
    }

    /// Every state change since the manager started, in order.
    pub fn trace(&self) -> Vec<Observation> {
        self.lock().trace.clone()
    }

    /// Blocks until the job is terminal or `timeout` passes.
    pub fn wait(&self, id: &str, timeout: Duration) -> Option<JobState> {
        let seq = seq_of(id)?;
        let deadline = Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            let state = inner.jobs.get(&seq)?.state;
            let now = Instant::now();
            if state.is_terminal() || now >= deadline {
                return Some(state);
            }
            inner = self
                .shared
                .changed
                .wait_timeout(inner, deadline - now)
                .expect("manager lock")
                .0;
        }
    }

    /// Results directory of a terminal job: `results/<id>` when DONE,
    /// `results/partial/<id>` when FAILED.
    pub fn results_dir(&self, id: &str) -> Option<PathBuf> {
        let job = self.job(id)?;
        let root = self.shared.opts.root.join("results");
        match job.state {
            JobState::Done => Some(root.join(&job.id)),
            JobState::Failed => Some(root.join("partial").join(&job.id)),
            _ => None,
        }
    }

    /// Why dispatch is paused, if it is.
    pub fn cleanup_blocked(&self) -> Option<String> {
        self.lock().cleanup_block.clone()
    }

    /// Operator acknowledgment that a failed cleanup was dealt with.
    pub fn ack_cleanup(&self) -> bool {
        let mut inner = self.lock();
        let was = inner.cleanup_block.take().is_some();
        self.shared.changed.notify_all();
        was
    }

    /// Stops the dispatcher after the job in progress.
    pub fn shutdown(&self) {
        self.lock().stopping = true;
        self.shared.changed.notify_all();
    }
}

fn move_to_partial(root: &Path, id: &str) {
    let from = root.join("results").join(id);
    if from.exists() {
        let to = root.join("results").join("partial").join(id);
        let _ = fs::remove_dir_all(&to);
        if let Err(e) = fs::rename(&from, &to) {
            warn!("moving {} to {}: {e}", from.display(), to.display());
        }
    }
}

impl Shared {
    fn set_state(&self, seq: u64, state: JobState, error: Option<String>) {
        let mut inner = self.inner.lock().expect("manager lock");
        Self::set_state_locked(self, &mut inner, seq, state, error);
    }

    fn set_state_locked(&self, inner: &mut Inner, seq: u64, state: JobState, error: Option<String>) {
        let Some(job) = inner.jobs.get_mut(&seq) else { return };
        let ok = match error {
            Some(e) => job.fail(e),
            None => job.advance(state),
        };
        if !ok {
            warn!("{}: refused transition {} -> {state}", job.id, job.state);
            return;
        }
        if let Err(e) = self.journal.save(job) {
            warn!("{}: journal: {e}", job.id);
        }
        let obs = Observation {
            t_ns: monotonic_ns(),
            job: job.id.clone(),
            state,
        };
        info!("{} {state}", obs.job);
        inner.trace.push(obs);
        self.changed.notify_all();
    }
}

fn dispatcher(shared: &Shared) {
    loop {
        let seq = {
            let mut inner = shared.inner.lock().expect("manager lock");
            loop {
                if inner.stopping {
                    return;
                }
                if inner.cleanup_block.is_none() {
                    if let Some(seq) = inner.queue.pop_front() {
                        // Dequeue and the move to PROVISIONING happen
                        // under one lock, so no other job can be active.
                        shared.set_state_locked(&mut inner, seq, JobState::Provisioning, None);
                        break seq;
                    }
                }
                inner = shared.changed.wait(inner).expect("manager lock");
            }
        };
        execute(shared, seq);
    }
}

/// Agents of one job, by role.
struct Session {
    nodes: Nodes,
    descriptors: BTreeMap<NodeRole, NodeDescriptor>,
    remote_results: BTreeMap<NodeRole, String>,
}

fn execute(shared: &Shared, seq: u64) {
    let job = shared.inner.lock().expect("manager lock").jobs[&seq].clone();
    let root = &shared.opts.root;
    let results = root.join("results").join(&job.id);
    let _ = fs::remove_dir_all(&results);
    let mut log = match fs::create_dir_all(&results).and_then(|_| RunLog::open(&results.join("run.log"))) {
        Ok(l) => l,
        Err(e) => {
            shared.set_state(seq, JobState::Failed, Some(format!("results directory: {e}")));
            return;
        }
    };
    log.line(&format!("{} started", job.id));
    let mut session = Session {
        nodes: Nodes::new(),
        descriptors: BTreeMap::new(),
        remote_results: BTreeMap::new(),
    };

    let mut outcome = prepare(shared, &job, &results, &mut session, &mut log).and_then(|config| {
        shared.set_state(seq, JobState::Running, None);
        run_plan(&job.plan, &config, &mut session.nodes, &mut log).map_err(|e| e.to_string())
    });
    if outcome.is_ok() {
        shared.set_state(seq, JobState::Collecting, None);
    }
    let cleanup = collect(shared, &mut session, &results, &mut log);
    if let (Ok(()), Some(problem)) = (&outcome, &cleanup) {
        outcome = Err(problem.clone());
    }
    if outcome.is_ok() {
        outcome = check_outputs(&job.plan, &session, &results).and_then(|_| report(&results));
    }
    shared.journal.release_archive(&job.id);
    match outcome {
        Ok(()) => {
            log.line(&format!("{} done", job.id));
            shared.set_state(seq, JobState::Done, None);
        }
        Err(reason) => {
            log.line(&format!("{} FAILED: {reason}", job.id));
            drop(log);
            move_to_partial(root, &job.id);
            let mut inner = shared.inner.lock().expect("manager lock");
            if let Some(block) = cleanup {
                inner.cleanup_block = Some(format!("{}: {block}", job.id));
            }
            shared.set_state_locked(&mut inner, seq, JobState::Failed, Some(reason));
        }
    }
}

fn node_err(node: &NodeDescriptor, what: impl std::fmt::Display) -> String {
    format!("{} node at {}: {what}", node.role, node.address)
}

/// Provisioning: every node gets the archive and stages it.
fn prepare(
    shared: &Shared,
    job: &EvaluationJob,
    results: &Path,
    session: &mut Session,
    log: &mut RunLog,
) -> Result<AdapterConfig, String> {
    let archive = shared.journal.archive(&job.id).map_err(|e| format!("stored archive: {e}"))?;
    let text = read_config(&archive).map_err(|e| e.to_string())?;
    let validated = validate_config(&text).map_err(|e| e.to_string())?;
    for w in &validated.warnings {
        log.line(&format!("config warning: {w}"));
    }
    let plan_json = serde_json::to_string_pretty(&job.plan).expect("plan serializes");
    fs::write(results.join("plan.json"), plan_json + "\n").map_err(|e| e.to_string())?;
    fs::write(results.join("config.resolved.toml"), validated.config.to_resolved_toml()).map_err(|e| e.to_string())?;

    let needed = job.plan.required_roles();
    let name = format!("{}.tar.gz", job.id);
    for node in job.nodes.iter().filter(|n| needed.contains(&n.role)) {
        let mut client = AgentClient::connect(node.control_addr(), shared.opts.connect_timeout)
            .map_err(|e| node_err(node, format!("unreachable: {e}")))?;
        let incoming = match client.call(&Request::Hello).map_err(|e| node_err(node, e))? {
            Reply::Hello { incoming, .. } => incoming,
            other => return Err(node_err(node, format!("unexpected reply {other:?}"))),
        };
        session.descriptors.insert(node.role, node.clone());
        shared
            .opts
            .delivery
            .send(node, &incoming, &name, &archive)
            .map_err(|e| node_err(node, format!("transfer failed: {e}")))?;
        let reply = client
            .call(&Request::Prepare {
                job: job.id.clone(),
                role: node.role,
                archive: name.clone(),
                sha256: job.sha256.clone(),
                host: node.host().to_string(),
            })
            .map_err(|e| node_err(node, e))?;
        if let Reply::Prepared { results_dir, warnings } = reply {
            for w in warnings {
                log.line(&format!("{}: warning: {w}", node.role));
            }
            log.line(&format!("{}: archive staged ({} bytes, sha256 {})", node.role, archive.len(), job.sha256));
            session.remote_results.insert(node.role, results_dir);
        }
        session.nodes.insert(node.role, client);
    }
    Ok(validated.config)
}

/// Tears every node down and gathers its files. Returns a reason to block
/// the queue when a node could not be cleaned up.
fn collect(shared: &Shared, session: &mut Session, results: &Path, log: &mut RunLog) -> Option<String> {
    let mut block = None;
    for (role, node) in &session.descriptors {
        match session.nodes.get_mut(role).map(|c| c.call(&Request::Teardown)) {
            Some(Ok(Reply::TornDown { summary })) => {
                log.line(&format!(
                    "{role}: teardown terminated {} processes{}",
                    summary.terminated.len(),
                    if summary.escalated { " (escalated to SIGKILL)" } else { "" }
                ));
                if !summary.unkillable.is_empty() {
                    let msg = format!("{role} node left unkillable processes {:?}", summary.unkillable);
                    log.line(&msg);
                    block = Some(msg);
                }
            }
            Some(Ok(other)) => log.line(&format!("{role}: unexpected teardown reply {other:?}")),
            Some(Err(e)) => log.line(&format!("{role}: teardown failed: {e}")),
            None => {}
        }
        if let Some(dir) = session.remote_results.get(role) {
            match shared.opts.delivery.fetch(node, dir, results) {
                Ok(files) => log.line(&format!("{role}: collected {} files", files.len())),
                Err(e) => log.line(&format!("{role}: collecting results failed: {e}")),
            }
        }
    }
    block
}

fn check_outputs(plan: &TestPlan, session: &Session, results: &Path) -> Result<(), String> {
    for t in &plan.tests {
        if !results.join(t.kind.record_file()).is_file() {
            return Err(format!("{} test produced no output", t.kind));
        }
    }
    if plan.sample_interval_ms > 0 {
        for role in session.descriptors.keys() {
            if !results.join(role.resources_file()).is_file() {
                return Err(format!("{role} node produced no resource samples"));
            }
        }
    }
    Ok(())
}

/// Loads whatever record files exist in `dir`.
pub fn load_result_set(dir: &Path) -> Result<ResultSet, String> {
    fn load<R: serde::de::DeserializeOwned>(p: PathBuf) -> Result<Vec<R>, String> {
        if p.is_file() {
            read_csv(&p).map_err(|e| e.to_string())
        } else {
            Ok(Vec::new())
        }
    }
    let mut set = ResultSet {
        rtt: load(dir.join("rtt.csv"))?,
        goodput: load(dir.join("goodput.csv"))?,
        brt: load(dir.join("brt.csv"))?,
        ..ResultSet::default()
    };
    for role in NodeRole::ALL {
        let p = dir.join(role.resources_file());
        if p.is_file() {
            set.resources.insert(role, load(p)?);
        }
    }
    Ok(set)
}

fn report(results: &Path) -> Result<(), String> {
    let set = load_result_set(results)?;
    emit_results(results, &set).map_err(|e| format!("report: {e}"))?;
    Ok(())
}
