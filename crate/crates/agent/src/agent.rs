//! The node agent: stages an adapter archive into a fresh environment,
//! runs hooks on request and reports measurements.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Seek, SeekFrom, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use comet_core::clock::monotonic_ns;
use comet_core::records::{read_csv, BRT_HEADER, GOODPUT_HEADER, RTT_HEADER};
use comet_core::template::{render, validate_config, BUILTIN_TEMPLATES};
use comet_core::timing::{parse_timing_log_str, TimingLogError};
use comet_core::{
    AdapterConfig, GoodputRecord, NodeRole, RetentionRecord, RetentionSource, RttRecord, RuntimeVars, TestKind,
};
use comet_sandbox::{reclaim, Backend, EnvSpec, Environment, HookProcess, Network, Sampler, SandboxError};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::archive::{self, CONFIG_ENTRY};
use crate::protocol::{
    read_request, write_reply, HookResult, Invocation, Reply, Request, TeardownSummary, PROTOCOL_VERSION,
};
use crate::tap::{FrameTap, TappedFrame};

/// How long a spawned hook may stay silent before it is considered started.
const SPAWN_SETTLE: Duration = Duration::from_secs(1);
const SHUTDOWN_HOOK_TIMEOUT: Duration = Duration::from_secs(10);
const ACTIVE_FILE: &str = "active";

#[derive(Debug, Clone)]
pub struct AgentOptions {
    pub root: PathBuf,
    pub network: Network,
    /// Use a container runtime when the adapter names an image.
    pub containers: bool,
}

impl AgentOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            network: Network::Loopback,
            containers: true,
        }
    }
}

struct Job {
    id: String,
    role: NodeRole,
    config: AdapterConfig,
    env: Environment,
    results: PathBuf,
    archive: PathBuf,
    host: String,
    log: File,
    cl_addr: Option<String>,
    sampler: Option<Sampler>,
    spawned: HashMap<u64, (HookProcess, Invocation, PathBuf)>,
    next_spawn: u64,
    invocations: u64,
    taps: Option<(FrameTap, FrameTap)>,
}

impl Job {
    fn note(&mut self, text: &str) {
        let _ = writeln!(self.log, "{} {text}", monotonic_ns());
    }
}

pub struct Agent {
    opts: AgentOptions,
    job: Option<Job>,
}

type Outcome = Result<Reply, String>;

fn append_rows<R: Serialize + DeserializeOwned>(raw: &Path, dest: &Path, header: &[&str]) -> Result<u64, String> {
    let rows: Vec<R> = read_csv(raw).map_err(|e| e.to_string())?;
    append_records(dest, header, &rows)
}

fn append_records<R: Serialize>(dest: &Path, header: &[&str], rows: &[R]) -> Result<u64, String> {
    let fresh = !dest.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dest)
        .map_err(|e| format!("{}: {e}", dest.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| e.to_string())?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())?;
    Ok(rows.len() as u64)
}

fn free_addr(host: &str) -> io::Result<String> {
    let l = TcpListener::bind((host, 0))?;
    Ok(l.local_addr()?.to_string())
}

fn hook_template(hook: &str) -> Result<(&'static str, &'static str), String> {
    BUILTIN_TEMPLATES
        .iter()
        .find(|t| t.hook == hook)
        .map(|t| (t.id, t.text))
        .ok_or_else(|| format!("no built-in script for hook {hook}"))
}

fn hook_result(code: Option<i32>, stdout: String, stderr: String, elapsed: Duration) -> HookResult {
    HookResult {
        code,
        stdout,
        stderr,
        elapsed_ms: elapsed.as_millis() as u64,
        rows: 0,
    }
}

impl Agent {
    /// Creates the agent's directories and cleans up after a previous
    /// agent process that died with an environment still active.
    pub fn new(mut opts: AgentOptions) -> io::Result<Self> {
        opts.root = std::path::absolute(&opts.root)?;
        for d in ["incoming", "env", "results"] {
            fs::create_dir_all(opts.root.join(d))?;
        }
        let active = opts.root.join(ACTIVE_FILE);
        if let Ok(text) = fs::read_to_string(&active) {
            let mut lines = text.lines();
            if let (Some(marker), Some(staging)) = (lines.next(), lines.next()) {
                let report = reclaim(marker, Path::new(staging));
                warn!(
                    "reclaimed stale environment {marker}: {} processes killed",
                    report.terminated.len()
                );
            }
            if let Some(archive) = lines.next() {
                let _ = fs::remove_file(archive);
            }
            let _ = fs::remove_file(&active);
        }
        Ok(Self { opts, job: None })
    }

    pub fn root(&self) -> &Path {
        &self.opts.root
    }

    pub fn incoming_dir(&self) -> PathBuf {
        self.opts.root.join("incoming")
    }

    pub fn results_dir(&self, job: &str) -> PathBuf {
        self.opts.root.join("results").join(job)
    }

    /// Handles one request. Returns the reply and whether to exit.
    pub fn handle(&mut self, req: Request) -> (Reply, bool) {
        let exit = matches!(req, Request::Exit);
        let outcome = match req {
            Request::Hello => Ok(Reply::Hello {
                version: PROTOCOL_VERSION,
                root: self.opts.root.display().to_string(),
                incoming: self.incoming_dir().display().to_string(),
            }),
            Request::Prepare {
                job,
                role,
                archive,
                sha256,
                host,
            } => self.prepare(job, role, &archive, &sha256, host),
            Request::Start { sample_interval_ms } => self.start(sample_interval_ms),
            Request::Run { invocation, timeout_ms } => self.run(invocation, Duration::from_millis(timeout_ms)),
            Request::Spawn { invocation } => self.spawn(invocation),
            Request::Join { id, timeout_ms, kill } => self.join(id, Duration::from_millis(timeout_ms), kill),
            Request::TimingMark => self.timing_mark(),
            Request::Retention {
                from,
                since_ns,
                payload_size,
                expected,
                timeout_ms,
            } => self.retention(from, since_ns, payload_size, expected, Duration::from_millis(timeout_ms)),
            Request::TapStart { egress_target } => self.tap_start(&egress_target),
            Request::TapRetention {
                payload_size,
                expected,
                timeout_ms,
            } => self.tap_retention(payload_size, expected, Duration::from_millis(timeout_ms)),
            Request::TapStop => {
                if let Some(j) = self.job.as_mut() {
                    j.taps = None;
                }
                Ok(Reply::Done)
            }
            Request::Teardown => Ok(Reply::TornDown {
                summary: self.teardown(),
            }),
            Request::Exit => {
                self.teardown();
                Ok(Reply::Done)
            }
        };
        let reply = outcome.unwrap_or_else(|message| {
            if let Some(j) = self.job.as_mut() {
                j.note(&format!("error: {message}"));
            }
            Reply::Error { message }
        });
        (reply, exit)
    }

    fn job(&mut self) -> Result<&mut Job, String> {
        self.job.as_mut().ok_or_else(|| "no job is prepared".to_string())
    }

    fn prepare(&mut self, id: String, role: NodeRole, archive_name: &str, sha256: &str, host: String) -> Outcome {
        if self.job.is_some() {
            self.teardown();
        }
        if archive_name.contains('/') || archive_name.contains("..") {
            return Err(format!("invalid archive name {archive_name:?}"));
        }
        let archive = self.incoming_dir().join(archive_name);
        if !archive.is_file() {
            return Err(format!("archive {archive_name} was not delivered"));
        }
        let results = self.results_dir(&id);
        fs::create_dir_all(results.join("raw")).map_err(|e| e.to_string())?;

        // The digest is checked before anything is unpacked.
        let actual = archive::sha256_file(&archive).map_err(|e| e.to_string())?;
        if !actual.eq_ignore_ascii_case(sha256) {
            let _ = fs::remove_file(&archive);
            return Err(format!(
                "archive rejected: checksum mismatch (expected {sha256}, got {actual})"
            ));
        }
        let config_text = archive::read_config(&fs::read(&archive).map_err(|e| e.to_string())?)
            .map_err(|e| format!("archive rejected: {e}"))?;
        let validated = validate_config(&config_text).map_err(|e| format!("{CONFIG_ENTRY}: {e}"))?;
        let config = validated.config;

        let mut spec = EnvSpec::process_group(format!("{id}-{role}"), self.opts.root.join("env"));
        spec.network = self.opts.network;
        if let (true, Some(image)) = (self.opts.containers, config.image()) {
            spec.backend = Backend::Container;
            spec.image = Some(image.to_string());
        }
        spec.vars = config.env.clone();
        let env = Environment::create(spec).map_err(|e| e.to_string())?;
        fs::write(
            self.opts.root.join(ACTIVE_FILE),
            format!("{}\n{}\n{}\n", env.marker(), env.staging_dir().display(), archive.display()),
        )
        .map_err(|e| e.to_string())?;
        archive::verify_and_unpack(&archive, sha256, env.staging_dir()).map_err(|e| format!("archive rejected: {e}"))?;

        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(results.join(format!("agent_{role}.log")))
            .map_err(|e| e.to_string())?;
        let mut warnings = validated.warnings;
        warnings.extend(env.warnings().iter().cloned());
        let mut job = Job {
            id,
            role,
            config,
            env,
            results: results.clone(),
            archive,
            host,
            log,
            cl_addr: None,
            sampler: None,
            spawned: HashMap::new(),
            next_spawn: 0,
            invocations: 0,
            taps: None,
        };
        job.note(&format!("prepared job {} as {role}", job.id));
        for w in &warnings {
            job.note(&format!("warning: {w}"));
        }
        self.job = Some(job);
        Ok(Reply::Prepared {
            results_dir: results.display().to_string(),
            warnings,
        })
    }

    fn vars(job: &Job, inv: &Invocation, result_path: &Path) -> RuntimeVars {
        RuntimeVars {
            role: job.role,
            local_addr: job.cl_addr.clone().unwrap_or_default(),
            peer_addr: inv.peer_addr.clone(),
            payload_size: inv.payload_size,
            bundle_count: inv.bundle_count,
            result_path: result_path.display().to_string(),
        }
    }

    /// Renders the script for `inv`; returns it with its raw result path.
    fn script(job: &mut Job, inv: &Invocation) -> Result<(String, PathBuf), String> {
        let (template_id, text) = hook_template(&inv.hook)?;
        job.invocations += 1;
        let raw = job
            .results
            .join("raw")
            .join(format!("{:04}-{}.csv", job.invocations, inv.hook));
        let vars = Self::vars(job, inv, &raw);
        let rendered = render(template_id, text, &job.config, &vars).map_err(|e| format!("{}: {e}", inv.hook))?;
        Ok((rendered.text, raw))
    }

    fn start(&mut self, sample_interval_ms: u64) -> Outcome {
        let job = self.job()?;
        if job.cl_addr.is_some() {
            return Err("implementation already started".into());
        }
        let addr = free_addr(&job.host).map_err(|e| format!("no free port on {}: {e}", job.host))?;
        job.cl_addr = Some(addr.clone());
        let (script, _) = Self::script(job, &Invocation::new("start_node"))?;
        let timeout = Duration::from_secs(job.config.readiness_timeout_s);
        let started = Instant::now();
        let proc = job.env.start_implementation(&script, &addr, timeout).map_err(|e| match e {
            SandboxError::NotReady(_) => "implementation did not become ready".to_string(),
            other => other.to_string(),
        })?;
        job.env.adopt(proc);
        job.note(&format!("implementation ready on {addr} after {:?}", started.elapsed()));
        if sample_interval_ms > 0 {
            let path = job.results.join(job.role.resources_file());
            let sampler = Sampler::start(job.env.pid_source(), Duration::from_millis(sample_interval_ms), &path)
                .map_err(|e| format!("resource sampler: {e}"))?;
            job.sampler = Some(sampler);
        }
        Ok(Reply::Started {
            cl_addr: addr,
            warnings: job.env.warnings().to_vec(),
        })
    }

    fn record(job: &Job, kind: TestKind, raw: &Path) -> Result<u64, String> {
        if !raw.is_file() {
            return Err(format!("{kind} test produced no output ({} missing)", raw.display()));
        }
        let dest = job.results.join(kind.record_file());
        let rows = match kind {
            TestKind::Rtt => append_rows::<RttRecord>(raw, &dest, &RTT_HEADER),
            TestKind::Goodput => append_rows::<GoodputRecord>(raw, &dest, &GOODPUT_HEADER),
            TestKind::Brt => append_rows::<RetentionRecord>(raw, &dest, &BRT_HEADER),
        }
        .map_err(|e| format!("{kind} output: {e}"))?;
        Ok(rows)
    }

    fn finish(job: &mut Job, inv: &Invocation, raw: &Path, mut result: HookResult) -> Outcome {
        job.note(&format!(
            "{} exited {:?} after {} ms",
            inv.hook, result.code, result.elapsed_ms
        ));
        if let (true, Some(kind)) = (result.success(), inv.record) {
            result.rows = Self::record(job, kind, raw)?;
        }
        Ok(Reply::Finished { result })
    }

    fn run(&mut self, inv: Invocation, timeout: Duration) -> Outcome {
        let job = self.job()?;
        let (script, raw) = Self::script(job, &inv)?;
        job.note(&format!("run {}", inv.hook));
        let out = job.env.run_hook(&inv.hook, &script, timeout).map_err(|e| e.to_string())?;
        let result = hook_result(out.status.code(), out.stdout, out.stderr, out.elapsed);
        Self::finish(job, &inv, &raw, result)
    }

    fn spawn(&mut self, inv: Invocation) -> Outcome {
        let job = self.job()?;
        let (script, raw) = Self::script(job, &inv)?;
        job.note(&format!("spawn {}", inv.hook));
        let mut p = job.env.spawn_hook(&inv.hook, &script).map_err(|e| e.to_string())?;
        // Hooks that announce readiness on stdout are waited for; silent
        // ones get a fixed grace period.
        let deadline = Instant::now() + SPAWN_SETTLE;
        while Instant::now() < deadline && p.stdout().is_empty() {
            if let Ok(Some(st)) = p.try_wait() {
                return Err(format!(
                    "{} exited during startup ({st}): {}",
                    inv.hook,
                    p.stderr().trim()
                ));
            }
            thread::sleep(Duration::from_millis(5));
        }
        let id = job.next_spawn;
        job.next_spawn += 1;
        let stdout = p.stdout();
        job.note(&format!("spawned {} as #{id}", inv.hook));
        job.spawned.insert(id, (p, inv, raw));
        Ok(Reply::Spawned { id, stdout })
    }

    fn join(&mut self, id: u64, timeout: Duration, kill: bool) -> Outcome {
        let job = self.job()?;
        let (mut p, inv, raw) = job.spawned.remove(&id).ok_or_else(|| format!("no spawned hook #{id}"))?;
        let started = Instant::now();
        let status = if kill {
            p.kill();
            None
        } else {
            match p.wait_timeout(timeout).map_err(|e| e.to_string())? {
                Some(st) => Some(st),
                None => {
                    p.kill();
                    return Err(format!("{} timed out after {timeout:?}: {}", inv.hook, p.stderr().trim()));
                }
            }
        };
        let result = hook_result(status.and_then(|s| s.code()), p.stdout(), p.stderr(), started.elapsed());
        if kill {
            job.note(&format!("stopped {}", inv.hook));
            return Ok(Reply::Finished { result });
        }
        Self::finish(job, &inv, &raw, result)
    }

    fn timing_log_path(job: &Job) -> Result<PathBuf, String> {
        let t = job
            .config
            .timing_log
            .as_ref()
            .ok_or_else(|| "adapter declares no timing log".to_string())?;
        Ok(job.env.staging_dir().join(&t.path))
    }

    fn timing_mark(&mut self) -> Outcome {
        let job = self.job()?;
        let path = Self::timing_log_path(job)?;
        // Events may reach the file after the mark; the timestamp sorts
        // them out.
        let t_ns = monotonic_ns();
        let offset = Self::line_boundary(&path).map_err(|e| e.to_string())?;
        Ok(Reply::Mark { offset, t_ns })
    }

    /// End of the last complete line; the implementation may flush a log
    /// line in pieces.
    fn line_boundary(path: &Path) -> io::Result<u64> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e),
        };
        Ok(bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i as u64 + 1))
    }

    /// Complete lines of the log after `from`, and the line number of the
    /// first of them.
    fn read_log_tail(path: &Path, from: u64) -> io::Result<(String, usize)> {
        let mut f = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((String::new(), 1)),
            Err(e) => return Err(e),
        };
        let mut head = vec![0u8; from as usize];
        let got = f.read(&mut head)?;
        let first_line = head[..got].iter().filter(|b| **b == b'\n').count() + 1;
        f.seek(SeekFrom::Start(from))?;
        let mut text = String::new();
        BufReader::new(f).read_to_string(&mut text)?;
        match text.rfind('\n') {
            Some(i) => text.truncate(i + 1),
            None => text.clear(),
        }
        Ok((text, first_line))
    }

    fn retention(&mut self, from: u64, since_ns: u64, payload_size: u64, expected: u64, timeout: Duration) -> Outcome {
        let job = self.job()?;
        let path = Self::timing_log_path(job)?;
        let deadline = Instant::now() + timeout;
        let records = loop {
            let (text, first_line) = Self::read_log_tail(&path, from).map_err(|e| e.to_string())?;
            let log = parse_timing_log_str(&text, comet_core::timing::TimingDialect::V1, true).map_err(|e| match e {
                TimingLogError::Malformed { line, reason } => {
                    format!("timing log {} line {}: {reason}", path.display(), line + first_line - 1)
                }
                other => other.to_string(),
            })?;
            let records: Vec<RetentionRecord> = log
                .bundles()
                .into_iter()
                .filter(|b| b.first_ns().is_some_and(|t| t >= since_ns))
                .filter_map(|b| {
                    Some(RetentionRecord {
                        brt_ns: b.retention_ns()?,
                        ser_ns: b.ser_ns(),
                        deser_ns: b.deser_ns(),
                        payload_size,
                        bundle_id: b.bundle_id,
                        source: RetentionSource::ImplementationLog,
                    })
                })
                .collect();
            if records.len() as u64 >= expected || Instant::now() >= deadline {
                break records;
            }
            thread::sleep(Duration::from_millis(50));
        };
        if (records.len() as u64) < expected {
            return Err(format!(
                "timing log shows {} forwarded bundles, expected {expected}",
                records.len()
            ));
        }
        let dest = job.results.join(TestKind::Brt.record_file());
        let rows = append_records(&dest, &BRT_HEADER, &records)?;
        job.note(&format!("{rows} retention records from timing log"));
        Ok(Reply::Records { rows })
    }

    fn tap_start(&mut self, egress_target: &str) -> Outcome {
        let job = self.job()?;
        let cl = job.cl_addr.clone().ok_or("implementation not started")?;
        let bind = format!("{}:0", job.host);
        let ingress = FrameTap::start(&bind, &cl).map_err(|e| format!("ingress tap: {e}"))?;
        let egress = FrameTap::start(&bind, egress_target).map_err(|e| format!("egress tap: {e}"))?;
        let reply = Reply::Taps {
            ingress: ingress.addr().to_string(),
            egress: egress.addr().to_string(),
        };
        job.taps = Some((ingress, egress));
        Ok(reply)
    }

    fn tap_retention(&mut self, payload_size: u64, expected: u64, timeout: Duration) -> Outcome {
        let job = self.job()?;
        let (ingress, egress) = job.taps.as_ref().ok_or("taps not started")?;
        // Frames smaller than the payload are control traffic.
        let min_len = payload_size.min(u32::MAX as u64) as u32;
        let deadline = Instant::now() + timeout;
        while (ingress.count(min_len) as u64) < expected || (egress.count(min_len) as u64) < expected {
            if Instant::now() >= deadline {
                return Err(format!(
                    "taps saw {} ingress and {} egress frames, expected {expected}",
                    ingress.count(min_len),
                    egress.count(min_len)
                ));
            }
            thread::sleep(Duration::from_millis(20));
        }
        let keep = |v: Vec<TappedFrame>| -> Vec<TappedFrame> { v.into_iter().filter(|f| f.len >= min_len).collect() };
        let ins = keep(ingress.take());
        let outs = keep(egress.take());
        if expected == 0 {
            return Ok(Reply::Records { rows: 0 });
        }
        let records: Vec<RetentionRecord> = ins
            .iter()
            .zip(&outs)
            .enumerate()
            .map(|(i, (a, b))| RetentionRecord {
                bundle_id: format!("frame-{i}"),
                payload_size,
                brt_ns: b.first_ns.saturating_sub(a.last_ns),
                ser_ns: None,
                deser_ns: None,
                source: RetentionSource::Boundary,
            })
            .collect();
        let dest = job.results.join(TestKind::Brt.record_file());
        let rows = append_records(&dest, &BRT_HEADER, &records)?;
        job.note(&format!("{rows} retention records from boundary taps"));
        Ok(Reply::Records { rows })
    }

    /// Ends the current job. Safe without a job.
    pub fn teardown(&mut self) -> TeardownSummary {
        let Some(mut job) = self.job.take() else {
            return TeardownSummary {
                terminated: Vec::new(),
                escalated: false,
                unkillable: Vec::new(),
                staging_removed: true,
                results_dir: String::new(),
            };
        };
        job.taps = None;
        for (_, (mut p, _, _)) in job.spawned.drain() {
            p.kill();
        }
        if job.cl_addr.is_some() {
            let inv = Invocation::new("shutdown");
            match Self::script(&mut job, &inv) {
                Ok((script, _)) => match job.env.run_hook("shutdown", &script, SHUTDOWN_HOOK_TIMEOUT) {
                    Ok(out) if out.success() => job.note("shutdown hook done"),
                    Ok(out) => job.note(&format!("shutdown hook exited {:?}: {}", out.status.code(), out.stderr.trim())),
                    Err(e) => job.note(&format!("shutdown hook: {e}")),
                },
                Err(e) => job.note(&format!("shutdown hook: {e}")),
            }
        }
        if let Some(s) = job.sampler.take() {
            match s.stop() {
                Ok(r) => job.note(&format!("{} resource samples", r.samples)),
                Err(e) => job.note(&format!("resource sampler: {e}")),
            }
        }
        let report = job.env.teardown();
        job.note(&format!(
            "teardown: {} processes terminated, escalated={}, unkillable={:?}",
            report.terminated.len(),
            report.escalated,
            report.unkillable
        ));
        let _ = fs::remove_file(&job.archive);
        let _ = fs::remove_dir_all(job.results.join("raw"));
        if report.unkillable.is_empty() {
            let _ = fs::remove_file(self.opts.root.join(ACTIVE_FILE));
        }
        info!("job {} torn down", job.id);
        TeardownSummary {
            terminated: report.terminated,
            escalated: report.escalated,
            unkillable: report.unkillable,
            staging_removed: report.staging_removed,
            results_dir: job.results.display().to_string(),
        }
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        self.teardown();
    }
}

fn serve_connection(agent: &mut Agent, stream: TcpStream) -> io::Result<bool> {
    let _ = stream.set_nodelay(true);
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    while let Some(req) = read_request(&mut reader)? {
        let (reply, exit) = match req {
            Ok(r) => agent.handle(r),
            Err(e) => (
                Reply::Error {
                    message: format!("bad request: {e}"),
                },
                false,
            ),
        };
        write_reply(&mut writer, &reply)?;
        if exit {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Serves control connections one at a time until an `exit` request.
pub fn serve(listener: TcpListener, mut agent: Agent) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        match serve_connection(&mut agent, stream) {
            Ok(true) => return Ok(()),
            Ok(false) => {}
            Err(e) => warn!("control connection: {e}"),
        }
    }
    Ok(())
}

/// Runs an agent on a background thread; returns its control address.
pub fn spawn_local(opts: AgentOptions) -> io::Result<(String, thread::JoinHandle<io::Result<()>>)> {
    let agent = Agent::new(opts)?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    let handle = thread::Builder::new()
        .name("agent".into())
        .spawn(move || serve(listener, agent))?;
    Ok((addr, handle))
}
