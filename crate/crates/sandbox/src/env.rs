//! Environment lifecycle: create, run hooks, wait for readiness, tear down.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use thiserror::Error;

use crate::procfs;

pub const DEFAULT_READINESS_TIMEOUT: Duration = Duration::from_secs(30);
pub const MARKER_VAR: &str = "COMET_ENV";
const TERM_GRACE: Duration = Duration::from_secs(3);
const KILL_GRACE: Duration = Duration::from_secs(3);
const CONTAINER_RUNTIMES: [&str; 2] = ["docker", "podman"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Container,
    ProcessGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    Loopback,
    HostLan,
}

/// Optional caps; only the container backend enforces them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Limits {
    pub cpu_cores: Option<f64>,
    pub mem_bytes: Option<u64>,
}

impl Limits {
    pub fn is_empty(&self) -> bool {
        self.cpu_cores.is_none() && self.mem_bytes.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub id: String,
    /// Parent of the staging directory; the environment owns `root/id`.
    pub staging_root: PathBuf,
    pub backend: Backend,
    pub network: Network,
    /// Image for the container backend.
    pub image: Option<String>,
    pub vars: BTreeMap<String, String>,
    pub limits: Limits,
}

impl EnvSpec {
    pub fn process_group(id: impl Into<String>, staging_root: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            staging_root: staging_root.into(),
            backend: Backend::ProcessGroup,
            network: Network::Loopback,
            image: None,
            vars: BTreeMap::new(),
            limits: Limits::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("environment {id}: {source}")]
    Io { id: String, source: io::Error },
    #[error("environment {0} was torn down")]
    TornDown(String),
    #[error("hook {hook} timed out after {after:?}")]
    HookTimeout { hook: String, after: Duration },
    #[error("implementation exited before becoming ready ({status}): {stderr}")]
    ExitedEarly { status: String, stderr: String },
    #[error("implementation did not become ready within {0:?}")]
    NotReady(Duration),
    #[error("container runtime {runtime}: {message}")]
    Container { runtime: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TeardownReport {
    /// Processes that were running at teardown and were signalled.
    pub terminated: Vec<i32>,
    /// Whether SIGKILL was needed.
    pub escalated: bool,
    /// Processes still alive after SIGKILL.
    pub unkillable: Vec<i32>,
    pub staging_removed: bool,
    pub container_removed: bool,
}

impl TeardownReport {
    pub fn is_clean(&self) -> bool {
        self.unkillable.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct HookOutput {
    pub status: ExitStatus,
    pub stdout: String,
    pub stderr: String,
    pub elapsed: Duration,
}

impl HookOutput {
    pub fn success(&self) -> bool {
        self.status.success()
    }
}

/// A hook running in the background.
#[derive(Debug)]
pub struct HookProcess {
    pub name: String,
    child: Child,
    stdout_path: PathBuf,
    stderr_path: PathBuf,
}

impl HookProcess {
    pub fn pid(&self) -> i32 {
        self.child.id() as i32
    }

    pub fn try_wait(&mut self) -> io::Result<Option<ExitStatus>> {
        self.child.try_wait()
    }

    pub fn stdout(&self) -> String {
        fs::read_to_string(&self.stdout_path).unwrap_or_default()
    }

    pub fn stderr(&self) -> String {
        fs::read_to_string(&self.stderr_path).unwrap_or_default()
    }

    /// Waits up to `timeout`; `None` if still running.
    pub fn wait_timeout(&mut self, timeout: Duration) -> io::Result<Option<ExitStatus>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(st) = self.child.try_wait()? {
                return Ok(Some(st));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    /// Blocks until stdout contains `needle`, the process exits, or the
    /// timeout passes. Returns whether the text was seen.
    pub fn wait_for_output(&mut self, needle: &str, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.stdout().contains(needle) {
                return true;
            }
            if matches!(self.child.try_wait(), Ok(Some(_))) {
                return self.stdout().contains(needle);
            }
            thread::sleep(Duration::from_millis(5));
        }
        false
    }

    /// Kills the hook and everything it started.
    pub fn kill(&mut self) {
        let mut victims = procfs::descendants(self.pid());
        victims.push(self.pid());
        signal_all(None, &victims, libc::SIGKILL);
        let _ = self.child.wait();
    }
}

fn find_in_path(bin: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|d| d.join(bin))
        .find(|p| p.is_file())
}

static NONCE: AtomicU64 = AtomicU64::new(0);

/// One evaluation environment.
#[derive(Debug)]
pub struct Environment {
    id: String,
    marker: String,
    backend: Backend,
    network: Network,
    staging: PathBuf,
    vars: BTreeMap<String, String>,
    anchor: Option<Child>,
    container: Option<(String, String)>,
    children: Mutex<Vec<Child>>,
    invocation: AtomicU64,
    warnings: Vec<String>,
    torn_down: bool,
    /// pid -> belongs to this environment, cached across scans.
    membership: Arc<Mutex<HashMap<i32, bool>>>,
}

impl Environment {
    /// Creates a fresh staging directory and the process anchor.
    ///
    /// A leftover directory of the same id is removed first. When the
    /// container backend is requested but no runtime is installed, the
    /// process-group backend is used and a warning is recorded.
    pub fn create(spec: EnvSpec) -> Result<Self, SandboxError> {
        let io_err = |source| SandboxError::Io {
            id: spec.id.clone(),
            source,
        };
        let staging = std::path::absolute(spec.staging_root.join(&spec.id)).map_err(io_err)?;
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err)?;
        }
        fs::create_dir_all(staging.join("scripts")).map_err(io_err)?;
        fs::create_dir_all(staging.join("logs")).map_err(io_err)?;

        let marker = format!(
            "{}-{}-{}",
            spec.id,
            std::process::id(),
            NONCE.fetch_add(1, Ordering::Relaxed)
        );
        let mut warnings = Vec::new();
        let mut backend = spec.backend;
        let mut container = None;
        if backend == Backend::Container {
            match CONTAINER_RUNTIMES.iter().find_map(|r| find_in_path(r).map(|_| *r)) {
                None => {
                    warnings.push(
                        "container backend unavailable (no docker or podman found); \
                         falling back to process-group backend with reduced isolation"
                            .to_string(),
                    );
                    backend = Backend::ProcessGroup;
                }
                Some(runtime) => {
                    let Some(image) = spec.image.clone() else {
                        return Err(SandboxError::Container {
                            runtime: runtime.into(),
                            message: "no image configured".into(),
                        });
                    };
                    let name = format!("comet-{marker}");
                    start_container(runtime, &name, &image, &staging, &marker, &spec)?;
                    container = Some((runtime.to_string(), name));
                }
            }
        }
        if backend == Backend::ProcessGroup && !spec.limits.is_empty() {
            warnings.push("resource limits are not enforced by the process-group backend".to_string());
        }
        for w in &warnings {
            warn!("{}: {w}", spec.id);
        }

        let anchor = Command::new("sleep")
            .arg("2147483647")
            .env(MARKER_VAR, &marker)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .process_group(0)
            .spawn()
            .map_err(io_err)?;

        Ok(Self {
            id: spec.id,
            marker,
            backend,
            network: spec.network,
            staging,
            vars: spec.vars,
            anchor: Some(anchor),
            container,
            children: Mutex::new(Vec::new()),
            invocation: AtomicU64::new(0),
            warnings,
            torn_down: false,
            membership: Arc::new(Mutex::new(HashMap::new())),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn network(&self) -> Network {
        self.network
    }

    pub fn staging_dir(&self) -> &Path {
        &self.staging
    }

    /// Fidelity warnings raised while creating the environment.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    /// Process group of processes started here, while the environment lives.
    pub fn process_group(&self) -> Option<i32> {
        self.pgid()
    }

    fn pgid(&self) -> Option<i32> {
        self.anchor.as_ref().map(|c| c.id() as i32)
    }

    fn check_live(&self) -> Result<(), SandboxError> {
        if self.torn_down {
            Err(SandboxError::TornDown(self.id.clone()))
        } else {
            Ok(())
        }
    }

    fn io_err(&self, source: io::Error) -> SandboxError {
        SandboxError::Io {
            id: self.id.clone(),
            source,
        }
    }

    /// Builds the command for a staged script and returns it with its log
    /// paths.
    fn command_for(&self, name: &str, script: &str) -> Result<(Command, PathBuf, PathBuf), SandboxError> {
        self.check_live()?;
        let n = self.invocation.fetch_add(1, Ordering::Relaxed);
        let script_path = self.staging.join("scripts").join(format!("{n:03}-{name}.sh"));
        fs::write(&script_path, script).map_err(|e| self.io_err(e))?;
        let stdout_path = self.staging.join("logs").join(format!("{n:03}-{name}.out"));
        let stderr_path = self.staging.join("logs").join(format!("{n:03}-{name}.err"));

        let mut cmd = match &self.container {
            Some((runtime, cname)) => {
                let mut c = Command::new(runtime);
                c.arg("exec")
                    .arg("-w")
                    .arg("/work")
                    .arg(cname)
                    .arg("sh")
                    .arg(format!("/work/scripts/{}", script_path.file_name().expect("file name").to_string_lossy()));
                c
            }
            None => {
                let mut c = Command::new("sh");
                c.arg(&script_path).current_dir(&self.staging);
                c
            }
        };
        cmd.env(MARKER_VAR, &self.marker)
            .env("COMET_INVOCATION", format!("{}-{n}", self.marker))
            .envs(&self.vars)
            .stdin(Stdio::null())
            .stdout(File::create(&stdout_path).map_err(|e| self.io_err(e))?)
            .stderr(File::create(&stderr_path).map_err(|e| self.io_err(e))?);
        if let Some(pgid) = self.pgid() {
            cmd.process_group(pgid);
        }
        Ok((cmd, stdout_path, stderr_path))
    }

    /// Starts `script` in the background.
    pub fn spawn_hook(&self, name: &str, script: &str) -> Result<HookProcess, SandboxError> {
        let (mut cmd, stdout_path, stderr_path) = self.command_for(name, script)?;
        let child = cmd.spawn().map_err(|e| self.io_err(e))?;
        Ok(HookProcess {
            name: name.to_string(),
            child,
            stdout_path,
            stderr_path,
        })
    }

    /// Runs `script` to completion, killing it after `timeout`.
    pub fn run_hook(&self, name: &str, script: &str, timeout: Duration) -> Result<HookOutput, SandboxError> {
        let start = Instant::now();
        let mut p = self.spawn_hook(name, script)?;
        match p.wait_timeout(timeout).map_err(|e| self.io_err(e))? {
            Some(status) => Ok(HookOutput {
                status,
                stdout: p.stdout(),
                stderr: p.stderr(),
                elapsed: start.elapsed(),
            }),
            None => {
                p.kill();
                Err(SandboxError::HookTimeout {
                    hook: name.to_string(),
                    after: timeout,
                })
            }
        }
    }

    /// Launches the implementation and waits until `ready_addr` accepts a
    /// TCP connection.
    pub fn start_implementation(
        &self,
        script: &str,
        ready_addr: &str,
        timeout: Duration,
    ) -> Result<HookProcess, SandboxError> {
        let mut p = self.spawn_hook("start_node", script)?;
        match wait_ready(&mut p, ready_addr, timeout) {
            Ok(()) => Ok(p),
            Err(e) => {
                p.kill();
                Err(e)
            }
        }
    }

    /// Keeps a background hook alive until teardown reaps it.
    pub fn adopt(&self, p: HookProcess) {
        self.children.lock().expect("children lock").push(p.child);
    }

    /// Processes currently belonging to the environment.
    pub fn pids(&self) -> Vec<i32> {
        if self.torn_down {
            return Vec::new();
        }
        member_pids(&self.marker, self.pgid(), &self.membership)
    }

    /// A pid source for the sampler. Yields `None` once the environment
    /// is gone.
    pub fn pid_source(&self) -> impl FnMut() -> Option<Vec<i32>> + Send + 'static {
        let marker = self.marker.clone();
        let pgid = self.pgid();
        let membership = Arc::clone(&self.membership);
        move || {
            let anchor = pgid?;
            if !procfs::is_alive(anchor) {
                return None;
            }
            Some(
                member_pids(&marker, Some(anchor), &membership)
                    .into_iter()
                    .filter(|p| *p != anchor)
                    .collect(),
            )
        }
    }

    /// Terminates every process of the environment and removes its
    /// staging directory. Safe to call more than once.
    pub fn teardown(&mut self) -> TeardownReport {
        let mut report = TeardownReport::default();
        if self.torn_down {
            return report;
        }
        self.torn_down = true;
        let pgid = self.pgid();
        let victims = member_pids(&self.marker, pgid, &self.membership);
        report.terminated = victims.clone();

        signal_all(pgid, &victims, libc::SIGTERM);
        if !self.wait_gone(pgid, &victims, TERM_GRACE) {
            report.escalated = true;
            let remaining = member_pids(&self.marker, pgid, &self.membership);
            signal_all(pgid, &remaining, libc::SIGKILL);
            if !self.wait_gone(pgid, &remaining, KILL_GRACE) {
                report.unkillable = member_pids(&self.marker, pgid, &self.membership);
            }
        }
        self.reap();

        if let Some((runtime, name)) = self.container.take() {
            report.container_removed = Command::new(&runtime)
                .args(["rm", "-f", &name])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .map(|s| s.success())
                .unwrap_or(false);
        }
        report.staging_removed = match fs::remove_dir_all(&self.staging) {
            Ok(()) => true,
            Err(e) if e.kind() == io::ErrorKind::NotFound => true,
            Err(e) => {
                warn!("{}: cannot remove {}: {e}", self.id, self.staging.display());
                false
            }
        };
        report
    }

    fn reap(&mut self) {
        if let Some(mut a) = self.anchor.take() {
            let _ = a.kill();
            let _ = a.wait();
        }
        for mut c in self.children.lock().expect("children lock").drain(..) {
            let _ = c.kill();
            let _ = c.wait();
        }
    }

    fn wait_gone(&mut self, pgid: Option<i32>, pids: &[i32], grace: Duration) -> bool {
        let deadline = Instant::now() + grace;
        loop {
            // Reap our direct children so they do not linger as zombies.
            if let Some(a) = self.anchor.as_mut() {
                let _ = a.try_wait();
            }
            for c in self.children.lock().expect("children lock").iter_mut() {
                let _ = c.try_wait();
            }
            let alive = pids.iter().any(|p| procfs::is_alive(*p))
                || !member_pids(&self.marker, pgid, &self.membership).is_empty();
            if !alive {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }
}

impl Drop for Environment {
    fn drop(&mut self) {
        if !self.torn_down {
            self.teardown();
        }
    }
}

/// Cleans up after an environment whose owner died: kills every process
/// carrying `marker` and removes `staging`.
pub fn reclaim(marker: &str, staging: &Path) -> TeardownReport {
    let cache = Mutex::new(HashMap::new());
    let victims = member_pids(marker, None, &cache);
    signal_all(None, &victims, libc::SIGKILL);
    let deadline = Instant::now() + KILL_GRACE;
    while victims.iter().any(|p| procfs::is_alive(*p)) && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(10));
    }
    let unkillable = victims.iter().copied().filter(|p| procfs::is_alive(*p)).collect();
    let staging_removed = match fs::remove_dir_all(staging) {
        Ok(()) => true,
        Err(e) => e.kind() == io::ErrorKind::NotFound,
    };
    TeardownReport {
        escalated: !victims.is_empty(),
        terminated: victims,
        unkillable,
        staging_removed,
        container_removed: false,
    }
}

fn signal_all(pgid: Option<i32>, pids: &[i32], sig: i32) {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        if let Some(g) = pgid {
            libc::kill(-g, sig);
        }
        for p in pids {
            libc::kill(*p, sig);
        }
    }
}

/// Live processes carrying the marker or belonging to the process group.
///
/// Membership is decided once per pid and cached; only members are
/// re-read on later scans.
fn member_pids(marker: &str, pgid: Option<i32>, cache: &Mutex<HashMap<i32, bool>>) -> Vec<i32> {
    let entry = format!("{MARKER_VAR}={marker}");
    let me = std::process::id() as i32;
    let mut cache = cache.lock().expect("membership lock");
    let pids = procfs::all_pids();
    let live: std::collections::HashSet<i32> = pids.iter().copied().collect();
    cache.retain(|p, _| live.contains(p));
    let mut out = Vec::new();
    for pid in pids {
        if pid == me {
            continue;
        }
        let member = match cache.get(&pid) {
            Some(false) => continue,
            Some(true) => true,
            None => {
                let Some(stat) = procfs::read_stat(pid) else {
                    continue;
                };
                let m = Some(stat.pgrp) == pgid || procfs::environ_contains(pid, &entry);
                cache.insert(pid, m);
                m
            }
        };
        if member && procfs::is_alive(pid) {
            out.push(pid);
        }
    }
    out
}

/// Polls until `addr` accepts a TCP connection.
pub fn wait_ready(p: &mut HookProcess, addr: &str, timeout: Duration) -> Result<(), SandboxError> {
    let deadline = Instant::now() + timeout;
    let targets: Vec<_> = addr.to_socket_addrs().map(|a| a.collect()).unwrap_or_default();
    loop {
        if let Ok(Some(status)) = p.try_wait() {
            return Err(SandboxError::ExitedEarly {
                status: status.to_string(),
                stderr: p.stderr().trim().to_string(),
            });
        }
        if targets
            .iter()
            .any(|t| TcpStream::connect_timeout(t, Duration::from_millis(200)).is_ok())
        {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err(SandboxError::NotReady(timeout));
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn start_container(
    runtime: &str,
    name: &str,
    image: &str,
    staging: &Path,
    marker: &str,
    spec: &EnvSpec,
) -> Result<(), SandboxError> {
    let mut cmd = Command::new(runtime);
    cmd.args(["run", "-d", "--name", name])
        .arg("-e")
        .arg(format!("{MARKER_VAR}={marker}"))
        .arg("-v")
        .arg(format!("{}:/work", staging.display()))
        .args(["-w", "/work"]);
    // Both modes use host networking: the harness reaches the node on host
    // loopback or on the host's LAN address.
    cmd.args(["--network", "host"]);
    if let Some(c) = spec.limits.cpu_cores {
        cmd.arg(format!("--cpus={c}"));
    }
    if let Some(m) = spec.limits.mem_bytes {
        cmd.arg(format!("--memory={m}b"));
    }
    cmd.args([image, "sleep", "infinity"]);
    let out = cmd.output().map_err(|e| SandboxError::Container {
        runtime: runtime.into(),
        message: e.to_string(),
    })?;
    if out.status.success() {
        Ok(())
    } else {
        Err(SandboxError::Container {
            runtime: runtime.into(),
            message: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        })
    }
}
