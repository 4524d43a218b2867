mod common;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use comet_core::{NodeDescriptor, NodeRole, TestKind, TestPlan, TestSpec};
use comet_manager::{JobState, Manager, ManagerOptions};
use comet_sandbox::procfs;
use common::*;

/// A `comet agent` process, killed on drop.
struct AgentProc {
    child: Child,
    addr: String,
}

impl AgentProc {
    fn spawn(root: &Path, bind: &str) -> Self {
        let mut child = Command::new(COMET)
            .args(["agent", "--bind", bind, "--root"])
            .arg(root)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("agent listening on ")
            .unwrap_or_else(|| panic!("unexpected agent banner {line:?}"))
            .to_string();
        Self { child, addr }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for AgentProc {
    fn drop(&mut self) {
        self.kill();
    }
}

fn tagged(marker: &str) -> Vec<i32> {
    let entry = format!("COMET_ENV={marker}");
    procfs::all_pids()
        .into_iter()
        .filter(|p| procfs::is_alive(*p) && procfs::environ_contains(*p, &entry))
        .collect()
}

/// Marker and staging directory of the environment an agent has open.
fn active_env(agent_root: &Path) -> Option<(String, PathBuf)> {
    let text = fs::read_to_string(agent_root.join("active")).ok()?;
    let mut lines = text.lines();
    Some((lines.next()?.to_string(), PathBuf::from(lines.next()?)))
}

fn wait_for<T>(limit: Duration, mut f: impl FnMut() -> Option<T>) -> Option<T> {
    let deadline = Instant::now() + limit;
    loop {
        if let Some(v) = f() {
            return Some(v);
        }
        if Instant::now() > deadline {
            return None;
        }
        thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn killed_agent_fails_the_job_and_a_restart_reclaims_its_environment() {
    let dir = tempfile::tempdir().unwrap();
    let roots: Vec<PathBuf> = NodeRole::ALL.iter().map(|r| dir.path().join(r.as_str())).collect();
    let mut agents: Vec<AgentProc> = roots.iter().map(|r| AgentProc::spawn(r, "127.0.0.1:0")).collect();
    let mut opts = ManagerOptions::new(dir.path().join("manager"));
    opts.default_nodes = NodeRole::ALL
        .iter()
        .zip(&agents)
        .map(|(&role, a)| NodeDescriptor::local(role, a.addr.clone()))
        .collect();
    let m = Manager::start(opts).unwrap();

    let receiver = NodeRole::ALL.iter().position(|r| *r == NodeRole::Receiver).unwrap();
    let long = TestPlan::new(vec![TestSpec::new(TestKind::Goodput, 30_000, vec![100_000])]);
    let doomed = m.submit(refnode_archive(), long, None).unwrap();
    let (marker, staging) = wait_for(Duration::from_secs(60), || {
        (m.status(&doomed)?.state == JobState::Running).then_some(())?;
        active_env(&roots[receiver])
    })
    .expect("receiver environment comes up");
    thread::sleep(Duration::from_millis(500));
    assert!(!tagged(&marker).is_empty());
    agents[receiver].kill();

    assert_eq!(m.wait(&doomed, WAIT), Some(JobState::Failed));
    let err = m.status(&doomed).unwrap().error.unwrap();
    assert!(err.contains("receiver"), "{err}");
    let partial = m.results_dir(&doomed).unwrap();
    assert!(partial.ends_with(format!("results/partial/{doomed}")));
    assert!(partial.join("run.log").is_file());
    assert!(partial.join("plan.json").is_file());
    // Nothing on the dead node cleaned up after itself.
    assert!(staging.exists());
    assert!(!tagged(&marker).is_empty());

    let addr = agents[receiver].addr.clone();
    agents[receiver] = AgentProc::spawn(&roots[receiver], &addr);
    assert!(tagged(&marker).is_empty(), "stale implementation survived the restart");
    assert!(!staging.exists());
    assert!(!roots[receiver].join("active").exists());

    let short = TestPlan::new(vec![TestSpec::new(TestKind::Goodput, 100, vec![10_000])]);
    let next = m.submit(refnode_archive(), short, None).unwrap();
    assert_eq!(m.wait(&next, WAIT), Some(JobState::Done), "{:?}", m.status(&next));
    assert!(m.results_dir(&next).unwrap().join("goodput.csv").is_file());
}
