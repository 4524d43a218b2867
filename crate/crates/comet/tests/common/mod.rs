#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use comet_agent::archive::pack_dir_with;
use comet_agent::AgentOptions;
use comet_core::{NodeDescriptor, NodeRole, TestPlan};
use comet_manager::{Manager, ManagerOptions};

pub const REFNODE: &str = env!("CARGO_BIN_EXE_refnode");
pub const COMET: &str = env!("CARGO_BIN_EXE_comet");
pub const WAIT: Duration = Duration::from_secs(600);

pub fn adapter_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../adapters/refnode")
}

/// The shipped refnode adapter with the freshly built binary inside.
pub fn refnode_archive() -> Vec<u8> {
    pack_dir_with(&adapter_dir(), &[("bin/refnode", Path::new(REFNODE))]).expect("adapter packs")
}

pub fn shipped_plan() -> TestPlan {
    serde_json::from_slice(&fs::read(adapter_dir().join("plan.json")).unwrap()).expect("shipped plan parses")
}

/// One in-process agent per role, rooted under `dir/<role>`.
pub fn local_agents(dir: &Path) -> Vec<NodeDescriptor> {
    NodeRole::ALL
        .iter()
        .map(|&role| {
            let (addr, _) = comet_agent::spawn_local(AgentOptions::new(dir.join(role.as_str()))).unwrap();
            NodeDescriptor::local(role, addr)
        })
        .collect()
}

pub fn manager(dir: &Path) -> Manager {
    let mut opts = ManagerOptions::new(dir.join("manager"));
    opts.default_nodes = local_agents(&dir.join("agents"));
    Manager::start(opts).unwrap()
}

/// Bits per second of one goodput row.
pub fn goodput_bps(bytes: u64, t_first_ns: u64, t_last_ns: u64) -> f64 {
    bytes as f64 * 8.0 / ((t_last_ns - t_first_ns) as f64 / 1e9)
}
