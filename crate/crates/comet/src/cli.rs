//! `comet` subcommands.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use comet_agent::archive::pack_dir_with;
use comet_agent::{serve, Agent, AgentOptions};
use comet_core::report::emit_results;
use comet_core::{NodeDescriptor, NodeRole, TestPlan};
use comet_manager::{load_result_set, spawn_server, Manager, ManagerOptions};
use comet_sandbox::Network;
use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::Client;
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(name = "comet", about = "DTN implementation performance evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NetworkArg {
    Loopback,
    HostLan,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the manager and its REST API.
    Serve {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// JSON list of node descriptors used when a submission names none.
        #[arg(long)]
        nodes: Option<PathBuf>,
        /// Start one in-process agent per role and use them as the default
        /// nodes.
        #[arg(long)]
        local_agents: bool,
    },
    /// Run a node agent.
    Agent {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: String,
        #[arg(long, value_enum, default_value = "loopback")]
        network: NetworkArg,
        /// Never use a container runtime, even for image adapters.
        #[arg(long)]
        no_containers: bool,
    },
    /// Pack an adapter directory into an archive.
    Pack {
        dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Add the refnode binary installed next to this one as bin/refnode.
        #[arg(long)]
        with_refnode: bool,
    },
    /// Submit an evaluation.
    Submit {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        nodes: Option<PathBuf>,
    },
    /// Show an evaluation's state.
    Status {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        id: String,
    },
    /// Download an evaluation's results as tar.gz.
    Results {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        id: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Regenerate the derived report files in a results directory.
    Report { dir: PathBuf },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// The `refnode` binary installed beside the running executable.
pub fn sibling_refnode() -> io::Result<PathBuf> {
    let exe = std::env::current_exe()?;
    let dir = exe.parent().ok_or_else(|| io::Error::other("executable has no directory"))?;
    // Test binaries live one level below the binaries in target/<profile>/deps.
    for candidate in [dir.join("refnode"), dir.join("..").join("refnode")] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(io::Error::new(io::ErrorKind::NotFound, format!("no refnode binary in {}", dir.display())))
}

fn http_error(r: reqwest::blocking::Response) -> String {
    let status = r.status();
    match r.json::<Value>() {
        Ok(v) => {
            let mut msg = format!("{status}: {}", v["error"].as_str().unwrap_or("request failed"));
            if let Some(list) = v["violations"].as_array() {
                for item in list.iter().filter_map(Value::as_str) {
                    msg.push_str(&format!("\n  - {item}"));
                }
            }
            msg
        }
        Err(_) => status.to_string(),
    }
}

fn execute(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Serve {
            root,
            bind,
            nodes,
            local_agents,
        } => {
            let mut opts = ManagerOptions::new(&root);
            if let Some(p) = nodes {
                opts.default_nodes = read_json(&p)?;
            }
            if local_agents {
                for role in NodeRole::ALL {
                    let agent_root = root.join("agents").join(role.as_str());
                    let (addr, _) = comet_agent::spawn_local(AgentOptions::new(agent_root)).map_err(|e| e.to_string())?;
                    log::info!("{role} agent on {addr}");
                    opts.default_nodes.retain(|n| n.role != role);
                    opts.default_nodes.push(NodeDescriptor::local(role, addr));
                }
            }
            let manager = Manager::start(opts).map_err(|e| e.to_string())?;
            let (addr, handle) = spawn_server(manager, &bind).map_err(|e| format!("{bind}: {e}"))?;
            println!("manager listening on http://{addr}");
            let _ = io::stdout().flush();
            handle
                .join()
                .map_err(|_| "API thread panicked".to_string())?
                .map_err(|e| e.to_string())
        }
        Command::Agent {
            root,
            bind,
            network,
            no_containers,
        } => {
            let mut opts = AgentOptions::new(root);
            opts.network = match network {
                NetworkArg::Loopback => Network::Loopback,
                NetworkArg::HostLan => Network::HostLan,
            };
            opts.containers = !no_containers;
            let agent = Agent::new(opts).map_err(|e| e.to_string())?;
            let listener = TcpListener::bind(&bind).map_err(|e| format!("{bind}: {e}"))?;
            println!("agent listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
            let _ = io::stdout().flush();
            serve(listener, agent).map_err(|e| e.to_string())
        }
        Command::Pack { dir, out, with_refnode } => {
            let refnode = if with_refnode {
                Some(sibling_refnode().map_err(|e| e.to_string())?)
            } else {
                None
            };
            let extra: Vec<(&str, &Path)> = refnode.iter().map(|p| ("bin/refnode", p.as_path())).collect();
            let bytes = pack_dir_with(&dir, &extra).map_err(|e| format!("{}: {e}", dir.display()))?;
            comet_agent::archive::read_config(&bytes).map_err(|e| e.to_string())?;
            fs::write(&out, &bytes).map_err(|e| format!("{}: {e}", out.display()))?;
            println!("{} ({} bytes, sha256 {})", out.display(), bytes.len(), comet_agent::archive::sha256_hex(&bytes));
            Ok(())
        }
        Command::Submit {
            server,
            archive,
            plan,
            nodes,
        } => {
            let bytes = fs::read(&archive).map_err(|e| format!("{}: {e}", archive.display()))?;
            let plan: TestPlan = read_json(&plan)?;
            let mut form = Form::new()
                .part("archive", Part::bytes(bytes).file_name("adapter.tar.gz"))
                .text("plan", serde_json::to_string(&plan).expect("plan serializes"));
            if let Some(p) = nodes {
                let nodes: Vec<NodeDescriptor> = read_json(&p)?;
                form = form.text("nodes", serde_json::to_string(&nodes).expect("nodes serialize"));
            }
            let r = Client::builder()
                .timeout(Duration::from_secs(600))
                .build()
                .map_err(|e| e.to_string())?
                .post(format!("{server}/evaluations"))
                .multipart(form)
                .send()
                .map_err(|e| e.to_string())?;
            if !r.status().is_success() {
                return Err(http_error(r));
            }
            let v: Value = r.json().map_err(|e| e.to_string())?;
            println!("{}", v["id"].as_str().unwrap_or_default());
            Ok(())
        }
        Command::Status { server, id } => {
            let r = reqwest::blocking::get(format!("{server}/evaluations/{id}")).map_err(|e| e.to_string())?;
            if !r.status().is_success() {
                return Err(http_error(r));
            }
            let v: Value = r.json().map_err(|e| e.to_string())?;
            let mut line = v["state"].as_str().unwrap_or("?").to_string();
            if let Some(p) = v["position"].as_u64() {
                line.push_str(&format!(" (position {p})"));
            }
            if let Some(e) = v["error"].as_str() {
                line.push_str(&format!(": {e}"));
            }
            println!("{line}");
            Ok(())
        }
        Command::Results { server, id, out } => {
            let r = reqwest::blocking::get(format!("{server}/evaluations/{id}/results")).map_err(|e| e.to_string())?;
            if !r.status().is_success() {
                return Err(http_error(r));
            }
            let bytes = r.bytes().map_err(|e| e.to_string())?;
            fs::write(&out, &bytes).map_err(|e| format!("{}: {e}", out.display()))
        }
        Command::Report { dir } => {
            let set = load_result_set(&dir)?;
            for p in emit_results(&dir, &set).map_err(|e| e.to_string())? {
                println!("{}", p.display());
            }
            Ok(())
        }
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
            eprintln!("comet: {msg}");
            1
        }
    }
}
