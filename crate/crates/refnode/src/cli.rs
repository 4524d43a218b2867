//! Command line of the `refnode` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use comet_core::records::{write_records, GOODPUT_HEADER, RTT_HEADER};

use crate::apps::{self, EchoResponder, GoodputReceiver, ReceiveLimits};
use crate::node::{Node, NodeConfig};

#[derive(Debug, Parser)]
#[command(name = "refnode", about = "Instrumented reference DTN node")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a node until it receives a shutdown command.
    Start {
        #[arg(long)]
        listen: String,
        #[arg(long, default_value = "dtn://node")]
        eid: String,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        nodelay: bool,
        #[arg(long)]
        timing_log: Option<PathBuf>,
        /// Static route as PREFIX=ADDR; PREFIX `*` is the default route.
        #[arg(long = "route", value_parser = parse_route)]
        routes: Vec<(String, String)>,
    },
    /// Add a route on a running node.
    Contact {
        #[arg(long)]
        node: String,
        #[arg(long)]
        peer: String,
        #[arg(long, default_value = "*")]
        prefix: String,
    },
    /// Closed-loop ping; writes one RTT record per bundle.
    Ping {
        #[arg(long)]
        node: String,
        #[arg(long)]
        eid: String,
        #[arg(long)]
        dest: String,
        #[arg(long)]
        count: u64,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        timeout_s: u64,
    },
    /// Echo every bundle back to its source.
    #[command(alias = "exchange")]
    Echo {
        #[arg(long)]
        node: String,
        #[arg(long)]
        eid: String,
    },
    /// Send a fixed number of equal-size bundles back to back.
    SendFixed {
        #[arg(long)]
        node: String,
        #[arg(long, default_value = "dtn://node/source")]
        eid: String,
        #[arg(long)]
        dest: String,
        #[arg(long)]
        count: u64,
        #[arg(long)]
        size: usize,
    },
    /// Receive bundles and write a goodput record.
    RecvGoodput {
        #[arg(long)]
        node: String,
        #[arg(long)]
        eid: String,
        #[arg(long)]
        expected: u64,
        #[arg(long)]
        size: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        start_timeout_s: u64,
        #[arg(long, default_value_t = 5000)]
        idle_timeout_ms: u64,
    },
    /// Shut a node down.
    Stop {
        #[arg(long)]
        node: String,
    },
}

fn parse_route(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(p, a)| (p.to_string(), a.to_string()))
        .ok_or_else(|| format!("route must be PREFIX=ADDR, got {s:?}"))
}

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p),
        _ => Ok(()),
    }
}

fn execute(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Start {
            listen,
            eid,
            nodelay,
            timing_log,
            routes,
        } => {
            if let Some(p) = &timing_log {
                ensure_parent(p).map_err(|e| format!("{}: {e}", p.display()))?;
            }
            let handle = Node::start(NodeConfig {
                listen: listen.clone(),
                eid,
                no_delay: nodelay,
                timing_log,
                routes,
            })
            .map_err(|e| format!("cannot listen on {listen}: {e}"))?;
            println!("listening on {}", handle.addr());
            let _ = std::io::stdout().flush();
            handle.wait().map_err(|e| format!("flushing timing log: {e}"))
        }
        Command::Contact { node, peer, prefix } => {
            apps::add_route(&node, &prefix, &peer).map_err(|e| e.to_string())
        }
        Command::Ping {
            node,
            eid,
            dest,
            count,
            size,
            out,
            timeout_s,
        } => {
            let outcome = apps::ping(&node, &eid, &dest, count, size, Duration::from_secs(timeout_s))
                .map_err(|e| e.to_string())?;
            println!("received={} dropped={}", outcome.records.len(), outcome.dropped);
            ensure_parent(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            write_records(&out, &RTT_HEADER, &outcome.records).map_err(|e| e.to_string())
        }
        Command::Echo { node, eid } => {
            let responder = EchoResponder::register(&node, &eid).map_err(|e| e.to_string())?;
            println!("ready");
            let _ = std::io::stdout().flush();
            responder.run().map(|_| ()).map_err(|e| e.to_string())
        }
        Command::SendFixed {
            node,
            eid,
            dest,
            count,
            size,
        } => apps::send_fixed(&node, &eid, &dest, count, size)
            .map(|_| ())
            .map_err(|e| e.to_string()),
        Command::RecvGoodput {
            node,
            eid,
            expected,
            size,
            out,
            start_timeout_s,
            idle_timeout_ms,
        } => {
            let rx = GoodputReceiver::register(&node, &eid).map_err(|e| e.to_string())?;
            println!("ready");
            let _ = std::io::stdout().flush();
            let limits = ReceiveLimits {
                start: Duration::from_secs(start_timeout_s),
                idle: Duration::from_millis(idle_timeout_ms),
            };
            let rec = rx.run(expected, size, limits).map_err(|e| e.to_string())?;
            println!(
                "delivered={} bytes={} t_first_ns={} t_last_ns={}",
                rec.delivered, rec.bytes_delivered, rec.t_first_ns, rec.t_last_ns
            );
            if rec.is_lossy() {
                println!("loss: expected {} delivered {}", rec.bundle_count, rec.delivered);
            }
            ensure_parent(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            write_records(&out, &GOODPUT_HEADER, &[rec]).map_err(|e| e.to_string())
        }
        Command::Stop { node } => apps::stop_node(&node).map_err(|e| e.to_string()),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("refnode: {msg}");
            1
        }
    }
}
