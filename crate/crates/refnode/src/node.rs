//! The forwarding node.
//!
//! Every accepted connection gets a reader thread. Bundles addressed to the
//! node itself go to the registered application, everything else follows
//! the static routing table to a next-hop link. When the link is idle the
//! reader thread starts the transmission itself with non-blocking sends;
//! whatever does not fit, and every bundle arriving while the link is busy,
//! is left to the link's egress thread. Bundles live in memory only;
//! anything that cannot be delivered yet (no application registered, no
//! route) is held until it can.
//!
//! Control bundles are sent to `dtn:none` and carry a text command:
//! `register`, `route <prefix> <addr>` or `shutdown`. The node answers each
//! with an `ok` bundle addressed to the sender.
//!
//! A connection to a next hop starts with an unanswered `hello <addr>`
//! naming the dialing node's listen address. The accepting node then uses
//! the same connection for traffic routed back to that address, so a pair
//! of nodes shares one session in both directions.
//!
//! `no_delay` applies to node-to-node sessions. Application connections
//! stand in for local IPC and always run without send coalescing.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};

use crate::bundle::{node_of, Bundle, NULL_EID};
use crate::cl::{ClConnection, ClError, Pending};
use crate::logsink::{self, TimingSink, TimingWriter};

pub const ACK_PAYLOAD: &[u8] = b"ok";
const RECONNECT_MIN: Duration = Duration::from_millis(20);
const RECONNECT_MAX: Duration = Duration::from_millis(500);

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub listen: String,
    /// Node EID, e.g. `dtn://relay`.
    pub eid: String,
    pub no_delay: bool,
    pub timing_log: Option<PathBuf>,
    /// `(prefix, next-hop address)`; the prefix `*` is the default route.
    pub routes: Vec<(String, String)>,
}

impl NodeConfig {
    pub fn new(listen: impl Into<String>, eid: impl Into<String>) -> Self {
        Self {
            listen: listen.into(),
            eid: eid.into(),
            no_delay: true,
            timing_log: None,
            routes: Vec::new(),
        }
    }
}

#[derive(Debug, Default)]
pub struct NodeStats {
    pub received: AtomicU64,
    pub forwarded: AtomicU64,
    pub delivered: AtomicU64,
    pub dropped: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub received: u64,
    pub forwarded: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub held: u64,
}

enum Hop {
    Peer(String),
    App(String),
}

struct Shared {
    eid: String,
    /// Address announced in `hello`.
    local_addr: String,
    no_delay: bool,
    sink: TimingSink,
    stop: AtomicBool,
    routes: Mutex<Vec<(String, String)>>,
    /// Registered applications, keyed by EID, tagged with a registration id.
    apps: Mutex<HashMap<String, (u64, Sender<Bundle>)>>,
    next_registration: AtomicU64,
    egress: Mutex<HashMap<String, Arc<PeerLink>>>,
    held: Mutex<Vec<Bundle>>,
    /// Clones of live sockets so stop() can unblock their threads.
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
    stats: NodeStats,
    shutdown_tx: Mutex<Option<Sender<()>>>,
}

pub struct Node;

/// Transmission state towards one next hop.
#[derive(Default)]
struct PeerLink {
    state: Mutex<LinkState>,
    wake: Condvar,
}

#[derive(Default)]
struct LinkState {
    /// Present while connected and nobody is sending.
    conn: Option<ClConnection>,
    busy: bool,
    backlog: VecDeque<Bundle>,
    /// A frame the reader thread started but could not finish.
    partial: Option<(Bundle, Pending)>,
    closed: bool,
}

impl PeerLink {
    fn lock(&self) -> std::sync::MutexGuard<'_, LinkState> {
        self.state.lock().expect("link lock")
    }

    fn close(&self) {
        self.lock().closed = true;
        self.wake.notify_all();
    }

    /// Sends `b` right away when the link is idle, otherwise queues it.
    fn submit(&self, b: Bundle, shared: &Shared) {
        let mut st = self.lock();
        let idle = !st.busy && st.backlog.is_empty() && st.partial.is_none();
        let conn = if idle { st.conn.take() } else { None };
        let Some(mut conn) = conn else {
            st.backlog.push_back(b);
            drop(st);
            self.wake.notify_one();
            return;
        };
        st.busy = true;
        drop(st);
        let outcome = conn.try_send_bundle(&b, &shared.sink);
        let mut st = self.lock();
        st.busy = false;
        match outcome {
            Ok(None) => {
                shared.stats.forwarded.fetch_add(1, Ordering::Relaxed);
                st.conn = Some(conn);
            }
            Ok(Some(rest)) => {
                st.partial = Some((b, rest));
                st.conn = Some(conn);
            }
            Err(ClError::Encode(e)) => {
                warn!("dropping bundle {}: {e}", b.id());
                shared.stats.dropped.fetch_add(1, Ordering::Relaxed);
                st.conn = Some(conn);
            }
            Err(e) => {
                debug!("inline send failed: {e}; egress thread reconnects");
                st.backlog.push_front(b);
            }
        }
        let more = st.partial.is_some() || !st.backlog.is_empty();
        drop(st);
        if more {
            self.wake.notify_one();
        }
    }
}

impl Shared {
    fn track(&self, s: &TcpStream) -> u64 {
        let id = self.next_conn.fetch_add(1, Ordering::Relaxed);
        if let Ok(c) = s.try_clone() {
            self.conns.lock().expect("conns lock").insert(id, c);
        }
        id
    }

    fn untrack(&self, id: u64) {
        self.conns.lock().expect("conns lock").remove(&id);
    }
}

/// A running node. Dropping the handle does not stop the node.
pub struct NodeHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown_rx: Receiver<()>,
    writer: Option<TimingWriter>,
}

impl Node {
    /// Binds the listener and starts accepting connections.
    pub fn start(cfg: NodeConfig) -> io::Result<NodeHandle> {
        let listener = TcpListener::bind(&cfg.listen)?;
        let addr = listener.local_addr()?;
        let local_addr = if cfg.listen.ends_with(":0") {
            addr.to_string()
        } else {
            cfg.listen.clone()
        };
        let (sink, writer) = match &cfg.timing_log {
            Some(p) => {
                let (s, w) = logsink::open(p)?;
                (s, Some(w))
            }
            None => (TimingSink::disabled(), None),
        };
        let (shutdown_tx, shutdown_rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            eid: cfg.eid.trim_end_matches('/').to_string(),
            local_addr,
            no_delay: cfg.no_delay,
            sink,
            stop: AtomicBool::new(false),
            routes: Mutex::new(cfg.routes.clone()),
            apps: Mutex::new(HashMap::new()),
            next_registration: AtomicU64::new(1),
            egress: Mutex::new(HashMap::new()),
            held: Mutex::new(Vec::new()),
            conns: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(1),
            stats: NodeStats::default(),
            shutdown_tx: Mutex::new(Some(shutdown_tx)),
        });
        let acceptor = Arc::clone(&shared);
        thread::Builder::new()
            .name("accept".into())
            .spawn(move || accept_loop(listener, acceptor))?;
        Ok(NodeHandle {
            addr,
            shared,
            shutdown_rx,
            writer,
        })
    }
}

impl NodeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> StatsSnapshot {
        let s = &self.shared.stats;
        StatsSnapshot {
            received: s.received.load(Ordering::Relaxed),
            forwarded: s.forwarded.load(Ordering::Relaxed),
            delivered: s.delivered.load(Ordering::Relaxed),
            dropped: s.dropped.load(Ordering::Relaxed),
            held: self.shared.held.lock().expect("held lock").len() as u64,
        }
    }

    pub fn add_route(&self, prefix: &str, addr: &str) {
        add_route(&self.shared, prefix, addr);
    }

    /// Blocks until a `shutdown` control bundle arrives.
    pub fn wait(self) -> io::Result<()> {
        let _ = self.shutdown_rx.recv();
        self.stop()
    }

    /// Closes every connection, stops accepting and flushes the timing log.
    pub fn stop(mut self) -> io::Result<()> {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the acceptor.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for (_, c) in self.shared.conns.lock().expect("conns lock").drain() {
            let _ = c.shutdown(std::net::Shutdown::Both);
        }
        self.shared.apps.lock().expect("apps lock").clear();
        for (_, link) in self.shared.egress.lock().expect("egress lock").drain() {
            link.close();
        }
        match self.writer.take() {
            Some(w) => w.finish(),
            None => Ok(()),
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let tracked = shared.track(&stream);
        let shared = Arc::clone(&shared);
        let spawned = thread::Builder::new()
            .name("ingress".into())
            .spawn(move || {
                match ClConnection::from_stream(stream, shared.no_delay) {
                    Ok(conn) => ingress_loop(conn, &shared),
                    Err(e) => warn!("connection setup failed: {e}"),
                }
                shared.untrack(tracked);
            });
        if let Err(e) = spawned {
            warn!("cannot spawn ingress thread: {e}");
        }
    }
}

fn ingress_loop(mut conn: ClConnection, shared: &Arc<Shared>) {
    let mut registration = None;
    run_ingress(&mut conn, shared, &mut registration);
    if let Some((eid, id)) = registration {
        unregister_app(shared, &eid, id);
    }
}

fn run_ingress(conn: &mut ClConnection, shared: &Arc<Shared>, registration: &mut Option<(String, u64)>) {
    let peer = conn.peer();
    loop {
        match conn.recv_bundle(&shared.sink) {
            Ok(Some(rx)) => {
                shared.stats.received.fetch_add(1, Ordering::Relaxed);
                if rx.bundle.dest_eid == NULL_EID {
                    if !control(conn, rx.bundle, shared, registration) {
                        return;
                    }
                } else {
                    dispatch(shared, rx.bundle);
                }
            }
            Ok(None) => return,
            Err(ClError::Decode(e)) => {
                shared.stats.dropped.fetch_add(1, Ordering::Relaxed);
                warn!("{peer}: dropped undecodable bundle: {e}");
            }
            Err(e) => {
                if !shared.stop.load(Ordering::SeqCst) {
                    debug!("{peer}: ingress closed: {e}");
                }
                return;
            }
        }
    }
}

fn ack(conn: &mut ClConnection, shared: &Shared, to: &Bundle) -> Result<(), ClError> {
    let mut reply = Bundle::new(to.source_eid.clone(), shared.eid.clone(), to.creation_ts.seq, ACK_PAYLOAD.to_vec());
    reply.creation_ts = to.creation_ts;
    conn.send_bundle(&reply, &TimingSink::disabled()).map(|_| ())
}

/// Handles a control bundle; returns false when the connection is done.
fn control(
    conn: &mut ClConnection,
    b: Bundle,
    shared: &Arc<Shared>,
    registration: &mut Option<(String, u64)>,
) -> bool {
    let cmd = String::from_utf8_lossy(&b.payload).into_owned();
    let mut words = cmd.split_whitespace();
    match words.next() {
        Some("register") => {
            if conn.set_no_delay(true).is_err() || ack(conn, shared, &b).is_err() {
                return false;
            }
            match conn.try_clone() {
                Ok(out) => {
                    if let Some(id) = register_app(shared, b.source_eid.clone(), out) {
                        *registration = Some((b.source_eid, id));
                    }
                }
                Err(e) => warn!("cannot register {}: {e}", b.source_eid),
            }
            true
        }
        Some("route") => {
            match (words.next(), words.next()) {
                (Some(prefix), Some(addr)) => add_route(shared, prefix, addr),
                _ => warn!("malformed route command {cmd:?}"),
            }
            ack(conn, shared, &b).is_ok()
        }
        Some("hello") => {
            match words.next() {
                Some(addr) => adopt_session(shared, addr, conn),
                None => warn!("malformed hello {cmd:?}"),
            }
            true
        }
        Some("shutdown") => {
            let _ = ack(conn, shared, &b);
            if let Some(tx) = shared.shutdown_tx.lock().expect("shutdown lock").take() {
                let _ = tx.send(());
            }
            false
        }
        _ => {
            warn!("unknown control command {cmd:?}");
            true
        }
    }
}

fn add_route(shared: &Arc<Shared>, prefix: &str, addr: &str) {
    {
        let mut routes = shared.routes.lock().expect("routes lock");
        routes.retain(|(p, _)| p != prefix);
        routes.push((prefix.to_string(), addr.to_string()));
    }
    release_held(shared);
}

fn register_app(shared: &Arc<Shared>, eid: String, conn: ClConnection) -> Option<u64> {
    let id = shared.next_registration.fetch_add(1, Ordering::Relaxed);
    let (tx, rx) = mpsc::channel::<Bundle>();
    let worker_shared = Arc::clone(shared);
    let worker_eid = eid.clone();
    let spawned = thread::Builder::new()
        .name("deliver".into())
        .spawn(move || app_egress(conn, rx, &worker_shared, &worker_eid, id));
    if let Err(e) = spawned {
        warn!("cannot spawn delivery thread for {eid}: {e}");
        return None;
    }
    shared.apps.lock().expect("apps lock").insert(eid, (id, tx));
    release_held(shared);
    Some(id)
}

fn unregister_app(shared: &Shared, eid: &str, id: u64) {
    let mut apps = shared.apps.lock().expect("apps lock");
    if apps.get(eid).is_some_and(|(current, _)| *current == id) {
        apps.remove(eid);
    }
}

fn release_held(shared: &Arc<Shared>) {
    let held = std::mem::take(&mut *shared.held.lock().expect("held lock"));
    for b in held {
        dispatch(shared, b);
    }
}

fn is_local(shared: &Shared, dest: &str) -> bool {
    dest == shared.eid || node_of(dest) == Some(shared.eid.as_str())
}

fn next_hop(shared: &Shared, dest: &str) -> Option<Hop> {
    if is_local(shared, dest) {
        return Some(Hop::App(dest.to_string()));
    }
    let routes = shared.routes.lock().expect("routes lock");
    routes
        .iter()
        .filter(|(p, _)| p == "*" || dest.starts_with(p.as_str()))
        .max_by_key(|(p, _)| if p == "*" { 0 } else { p.len() + 1 })
        .map(|(_, a)| Hop::Peer(a.clone()))
}

fn dispatch(shared: &Arc<Shared>, b: Bundle) {
    let b = match next_hop(shared, &b.dest_eid) {
        Some(Hop::App(eid)) => {
            let apps = shared.apps.lock().expect("apps lock");
            match apps.get(&eid) {
                Some((_, tx)) => match tx.send(b) {
                    Ok(()) => return,
                    Err(mpsc::SendError(b)) => b,
                },
                None => b,
            }
        }
        Some(Hop::Peer(addr)) => {
            let mut egress = shared.egress.lock().expect("egress lock");
            let link = match egress.get(&addr) {
                Some(l) => Arc::clone(l),
                None => match spawn_peer_egress(shared, &addr, None) {
                    Some(l) => {
                        egress.insert(addr.clone(), Arc::clone(&l));
                        l
                    }
                    None => {
                        drop(egress);
                        shared.held.lock().expect("held lock").push(b);
                        return;
                    }
                },
            };
            drop(egress);
            link.submit(b, shared);
            return;
        }
        None => b,
    };
    shared.held.lock().expect("held lock").push(b);
}

/// Uses an accepted connection from the node listening at `addr` as the
/// egress towards it, unless one already exists.
fn adopt_session(shared: &Arc<Shared>, addr: &str, conn: &ClConnection) {
    let mut egress = shared.egress.lock().expect("egress lock");
    if egress.contains_key(addr) {
        return;
    }
    let out = match conn.try_clone() {
        Ok(c) => c,
        Err(e) => {
            warn!("cannot reuse session from {addr}: {e}");
            return;
        }
    };
    if let Some(link) = spawn_peer_egress(shared, addr, Some(out)) {
        egress.insert(addr.to_string(), link);
    }
    drop(egress);
    release_held(shared);
}

fn spawn_peer_egress(shared: &Arc<Shared>, addr: &str, session: Option<ClConnection>) -> Option<Arc<PeerLink>> {
    let link = Arc::new(PeerLink::default());
    {
        let mut st = link.lock();
        st.conn = session;
    }
    let worker_shared = Arc::clone(shared);
    let worker_link = Arc::clone(&link);
    let worker_addr = addr.to_string();
    match thread::Builder::new()
        .name("egress".into())
        .spawn(move || peer_egress(&worker_addr, &worker_link, &worker_shared))
    {
        Ok(_) => Some(link),
        Err(e) => {
            warn!("cannot spawn egress thread for {addr}: {e}");
            None
        }
    }
}

/// Dials `addr`, announces this node and starts reading the reverse
/// direction. Retries with backoff until stopped.
fn dial(addr: &str, shared: &Arc<Shared>) -> Option<ClConnection> {
    let mut backoff = RECONNECT_MIN;
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            return None;
        }
        let attempt = ClConnection::connect(addr, shared.no_delay).and_then(|mut c| {
            let hello = Bundle::new(NULL_EID, shared.eid.clone(), 0, format!("hello {}", shared.local_addr).into_bytes());
            c.send_bundle(&hello, &TimingSink::disabled())?;
            let reader = c.try_clone()?;
            let reader_shared = Arc::clone(shared);
            thread::Builder::new()
                .name("session".into())
                .spawn(move || {
                    let tracked = reader_shared.track(reader.stream());
                    ingress_loop(reader, &reader_shared);
                    reader_shared.untrack(tracked);
                })?;
            Ok(c)
        });
        match attempt {
            Ok(c) => return Some(c),
            Err(e) => {
                debug!("egress {addr}: {e}");
                thread::sleep(backoff);
                backoff = (backoff * 2).min(RECONNECT_MAX);
            }
        }
    }
}

enum Job {
    Finish(Bundle, Pending),
    Send(Bundle),
}

/// Finishes frames the reader threads started, drains the backlog and
/// (re)connects when needed.
fn peer_egress(addr: &str, link: &PeerLink, shared: &Arc<Shared>) {
    let mut tracked = {
        let st = link.lock();
        st.conn.as_ref().map(|c| shared.track(c.stream()))
    };
    loop {
        let mut st = link.lock();
        let (job, conn) = loop {
            if st.closed {
                if let Some(id) = tracked {
                    shared.untrack(id);
                }
                return;
            }
            if !st.busy {
                if let Some((b, p)) = st.partial.take() {
                    break (Job::Finish(b, p), st.conn.take());
                }
                if let Some(b) = st.backlog.pop_front() {
                    break (Job::Send(b), st.conn.take());
                }
            }
            st = link.wake.wait(st).expect("link lock");
        };
        st.busy = true;
        drop(st);

        let mut conn = match conn {
            Some(c) => c,
            None => {
                if let Some(id) = tracked.take() {
                    shared.untrack(id);
                }
                match dial(addr, shared) {
                    Some(c) => {
                        tracked = Some(shared.track(c.stream()));
                        c
                    }
                    None => {
                        let mut st = link.lock();
                        st.busy = false;
                        st.closed = true;
                        return;
                    }
                }
            }
        };
        let failed = match job {
            Job::Finish(b, p) => match conn.finish(p, &shared.sink) {
                Ok(_) => {
                    shared.stats.forwarded.fetch_add(1, Ordering::Relaxed);
                    None
                }
                Err(e) => {
                    warn!("egress {addr}: {e}; reconnecting");
                    Some(b)
                }
            },
            Job::Send(b) => match conn.send_bundle(&b, &shared.sink) {
                Ok(_) => {
                    shared.stats.forwarded.fetch_add(1, Ordering::Relaxed);
                    None
                }
                Err(ClError::Encode(e)) => {
                    warn!("egress {addr}: dropping bundle {}: {e}", b.id());
                    shared.stats.dropped.fetch_add(1, Ordering::Relaxed);
                    None
                }
                Err(e) => {
                    warn!("egress {addr}: {e}; reconnecting");
                    Some(b)
                }
            },
        };
        let mut st = link.lock();
        st.busy = false;
        match failed {
            Some(b) => {
                st.backlog.push_front(b);
            }
            None => {
                st.conn = Some(conn);
            }
        }
    }
}

fn app_egress(mut conn: ClConnection, rx: Receiver<Bundle>, shared: &Shared, eid: &str, id: u64) {
    while let Ok(b) = rx.recv() {
        match conn.send_bundle(&b, &shared.sink) {
            Ok(_) => {
                shared.stats.delivered.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => {
                warn!("delivery to {eid} failed: {e}");
                shared.stats.dropped.fetch_add(1, Ordering::Relaxed);
                unregister_app(shared, eid, id);
                return;
            }
        }
    }
}
