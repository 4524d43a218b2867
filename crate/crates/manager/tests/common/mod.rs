#![allow(dead_code)]

use std::path::Path;
use std::time::Duration;

use comet_agent::archive::build;
use comet_agent::AgentOptions;
use comet_core::{NodeDescriptor, NodeRole, TestKind, TestPlan, TestSpec};
use comet_manager::{Manager, ManagerOptions};

pub const LISTEN: &str = r#"import socket, sys
host, port = sys.argv[1].rsplit(":", 1)
s = socket.socket()
s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
s.bind((host, int(port)))
s.listen()
while True:
    c, _ = s.accept()
    c.close()
"#;

/// A stand-in implementation: a listener plus hooks that write fixed,
/// deterministic records.
pub const CONFIG: &str = r#"schema_version = 1
name = "fake"
launch = "python3 listen.py"
readiness_timeout_s = 10

[hooks]
start_node = "exec {{launch}} {{LOCAL_ADDR}}"
configure_contact = "echo {{ROLE}} {{PEER_ADDR}} >> contacts.txt"
ping_app = '''seq 0 $(({{BUNDLE_COUNT}} - 1)) | awk -v s={{PAYLOAD_SIZE}} 'BEGIN { print "seq,payload_size,rtt_ns" } { print $1 "," s "," 1000 + 7 * $1 }' > {{RESULT_PATH}}'''
send_fixed_app = "sleep 0.1"
recv_goodput_app = '''echo ready; sleep 0.2; printf 'payload_size,bundle_count,delivered,bytes_delivered,t_first_ns,t_last_ns\n%s,%s,%s,%s,0,1000000000\n' {{PAYLOAD_SIZE}} {{BUNDLE_COUNT}} {{BUNDLE_COUNT}} $(({{PAYLOAD_SIZE}} * {{BUNDLE_COUNT}})) > {{RESULT_PATH}}'''
exchange_variable_app = "echo ready; exec sleep 1000"
shutdown = "true"
"#;

pub fn archive_with(config: &str) -> Vec<u8> {
    build(&[("comet.toml", config.as_bytes(), 0o644), ("listen.py", LISTEN.as_bytes(), 0o644)]).unwrap()
}

pub fn archive() -> Vec<u8> {
    archive_with(CONFIG)
}

pub fn plan() -> TestPlan {
    let mut p = TestPlan::new(vec![
        TestSpec::new(TestKind::Rtt, 10, vec![64]),
        TestSpec::new(TestKind::Goodput, 5, vec![100, 1000]),
    ]);
    p.sample_interval_ms = 50;
    p
}

/// In-process agents for sender and receiver, rooted under `dir`.
pub fn agents(dir: &Path) -> Vec<NodeDescriptor> {
    [NodeRole::Sender, NodeRole::Receiver]
        .into_iter()
        .map(|role| {
            let (addr, _) = comet_agent::spawn_local(AgentOptions::new(dir.join(role.as_str()))).unwrap();
            NodeDescriptor::local(role, addr)
        })
        .collect()
}

pub fn manager(dir: &Path) -> Manager {
    let mut opts = ManagerOptions::new(dir.join("manager"));
    opts.default_nodes = agents(&dir.join("agents"));
    opts.connect_timeout = Duration::from_secs(2);
    Manager::start(opts).unwrap()
}

pub const WAIT: Duration = Duration::from_secs(60);
