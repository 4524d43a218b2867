//! Applications run against a local node: ping, echo, fixed-size sender,
//! goodput receiver, and the control commands used by the hooks.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use comet_core::clock::monotonic_ns;
use comet_core::{GoodputRecord, RttRecord};
use thiserror::Error;

use crate::bundle::{Bundle, CreationTimestamp, NULL_EID};
use crate::cl::{ClConnection, ClError, Received};
use crate::logsink::TimingSink;
use crate::node::ACK_PAYLOAD;

/// Seconds between the Unix epoch and the DTN epoch (2000-01-01).
const DTN_EPOCH_UNIX_S: u64 = 946_684_800;
pub const DEFAULT_REPLY_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Cl(#[from] ClError),
    #[error("node closed the connection")]
    Closed,
    #[error("{dropped} of {count} pings unanswered, more than 1%")]
    TooManyDrops { dropped: u64, count: u64 },
    #[error("unexpected control reply {0:?}")]
    BadAck(String),
}

/// DTN time in milliseconds.
pub fn dtn_time_ms() -> u64 {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    (now.as_millis() as u64).saturating_sub(DTN_EPOCH_UNIX_S * 1000)
}

/// Deterministic filler so payloads are not all zero.
pub fn payload_of(size: usize, seed: u64) -> Vec<u8> {
    (0..size).map(|i| (i as u64).wrapping_mul(31).wrapping_add(seed) as u8).collect()
}

/// An application endpoint attached to a node.
pub struct AppClient {
    conn: ClConnection,
    eid: String,
    time: u64,
    seq: u64,
}

impl AppClient {
    pub fn connect(node: &str, eid: &str) -> Result<Self, AppError> {
        Ok(Self {
            conn: ClConnection::connect(node, true)?,
            eid: eid.to_string(),
            time: dtn_time_ms(),
            seq: 0,
        })
    }

    pub fn eid(&self) -> &str {
        &self.eid
    }

    fn next_ts(&mut self) -> CreationTimestamp {
        let ts = CreationTimestamp {
            time: self.time,
            seq: self.seq,
        };
        self.seq += 1;
        ts
    }

    /// Sends a control command and waits for the node's acknowledgement.
    pub fn control(&mut self, command: &str) -> Result<(), AppError> {
        let ts = self.next_ts();
        let b = Bundle {
            creation_ts: ts,
            ..Bundle::new(NULL_EID, self.eid.clone(), 0, command.as_bytes().to_vec())
        };
        self.conn.send_bundle(&b, &TimingSink::disabled())?;
        let reply = self
            .recv(Some(DEFAULT_REPLY_TIMEOUT))?
            .ok_or(AppError::Closed)?;
        if reply.bundle.payload != ACK_PAYLOAD || reply.bundle.creation_ts != ts {
            return Err(AppError::BadAck(String::from_utf8_lossy(&reply.bundle.payload).into_owned()));
        }
        Ok(())
    }

    /// Asks the node to deliver bundles for this client's EID here.
    pub fn register(&mut self) -> Result<(), AppError> {
        self.control("register")
    }

    pub fn send(&mut self, dest: &str, payload: Vec<u8>) -> Result<CreationTimestamp, AppError> {
        let ts = self.next_ts();
        let b = Bundle {
            creation_ts: ts,
            ..Bundle::new(dest, self.eid.clone(), 0, payload)
        };
        self.conn.send_bundle(&b, &TimingSink::disabled())?;
        Ok(ts)
    }

    pub fn send_bundle(&mut self, b: &Bundle) -> Result<(), AppError> {
        self.conn.send_bundle(b, &TimingSink::disabled())?;
        Ok(())
    }

    /// Next bundle; `Ok(None)` when the timeout passes with nothing pending.
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Received>, AppError> {
        self.conn.set_read_timeout(timeout).map_err(ClError::Io)?;
        match self.conn.recv_bundle(&TimingSink::disabled()) {
            Ok(Some(r)) => Ok(Some(r)),
            Ok(None) => Err(AppError::Closed),
            Err(ClError::Timeout) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn close(self) {
        self.conn.shutdown();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PingOutcome {
    pub records: Vec<RttRecord>,
    /// Pings without a reply within the per-bundle timeout.
    pub dropped: u64,
}

/// Share of unanswered pings tolerated before a run is abandoned.
pub fn drop_budget(count: u64) -> u64 {
    count / 100
}

/// Closed-loop ping: one bundle in flight, each answered by an echo app.
/// Unanswered pings are dropped; once more than 1% are lost the run stops
/// with [`AppError::TooManyDrops`].
pub fn ping(
    node: &str,
    eid: &str,
    dest: &str,
    count: u64,
    size: usize,
    reply_timeout: Duration,
) -> Result<PingOutcome, AppError> {
    let mut c = AppClient::connect(node, eid)?;
    c.register()?;
    let mut out = PingOutcome {
        records: Vec::with_capacity(count as usize),
        dropped: 0,
    };
    for i in 0..count {
        let t0 = monotonic_ns();
        let ts = c.send(dest, payload_of(size, i))?;
        let deadline = t0 + reply_timeout.as_nanos() as u64;
        loop {
            let now = monotonic_ns();
            let reply = if now >= deadline {
                None
            } else {
                c.recv(Some(Duration::from_nanos(deadline - now)))?
            };
            let Some(r) = reply else {
                out.dropped += 1;
                if out.dropped > drop_budget(count) {
                    return Err(AppError::TooManyDrops {
                        dropped: out.dropped,
                        count,
                    });
                }
                break;
            };
            // Echoes keep the creation timestamp; anything else is stale.
            if r.bundle.creation_ts == ts {
                out.records.push(RttRecord {
                    seq: i,
                    payload_size: size as u64,
                    rtt_ns: r.rx.last_ns.saturating_sub(t0).max(1),
                });
                break;
            }
        }
    }
    c.close();
    Ok(out)
}

/// Reflects every bundle back to its source until the node disconnects.
pub struct EchoResponder {
    client: AppClient,
}

impl EchoResponder {
    pub fn register(node: &str, eid: &str) -> Result<Self, AppError> {
        let mut client = AppClient::connect(node, eid)?;
        client.register()?;
        Ok(Self { client })
    }

    /// Echoes until the node disconnects; returns the number of bundles.
    pub fn run(mut self) -> Result<u64, AppError> {
        let mut n = 0;
        loop {
            let r = match self.client.recv(None) {
                Ok(Some(r)) => r,
                Ok(None) => continue,
                Err(AppError::Closed) => return Ok(n),
                Err(e) => return Err(e),
            };
            let reply = Bundle {
                dest_eid: r.bundle.source_eid,
                source_eid: self.client.eid().to_string(),
                ..r.bundle
            };
            self.client.send_bundle(&reply)?;
            n += 1;
        }
    }
}

pub fn echo(node: &str, eid: &str) -> Result<u64, AppError> {
    EchoResponder::register(node, eid)?.run()
}

/// Sends `count` bundles of `size` bytes back to back.
pub fn send_fixed(node: &str, eid: &str, dest: &str, count: u64, size: usize) -> Result<u64, AppError> {
    let mut c = AppClient::connect(node, eid)?;
    let payload = payload_of(size, 0);
    for _ in 0..count {
        c.send(dest, payload.clone())?;
    }
    c.close();
    Ok(count)
}

#[derive(Debug, Clone, Copy)]
pub struct ReceiveLimits {
    /// Wait for the first bundle.
    pub start: Duration,
    /// Wait between bundles once traffic started.
    pub idle: Duration,
}

impl Default for ReceiveLimits {
    fn default() -> Self {
        Self {
            start: Duration::from_secs(60),
            idle: Duration::from_secs(5),
        }
    }
}

/// Receiving side of a goodput test. Call [`GoodputReceiver::run`] after
/// the sender has been told to start.
pub struct GoodputReceiver {
    client: AppClient,
}

impl GoodputReceiver {
    /// Connects and registers; once this returns bundles are delivered here.
    pub fn register(node: &str, eid: &str) -> Result<Self, AppError> {
        let mut client = AppClient::connect(node, eid)?;
        client.register()?;
        Ok(Self { client })
    }

    /// Receives until `expected` bundles arrived or the limits expire.
    pub fn run(mut self, expected: u64, payload_size: u64, limits: ReceiveLimits) -> Result<GoodputRecord, AppError> {
        let mut rec = GoodputRecord {
            payload_size,
            bundle_count: expected,
            delivered: 0,
            bytes_delivered: 0,
            t_first_ns: 0,
            t_last_ns: 0,
        };
        while rec.delivered < expected {
            let wait = if rec.delivered == 0 { limits.start } else { limits.idle };
            let Some(r) = self.client.recv(Some(wait))? else {
                break;
            };
            if rec.delivered == 0 {
                rec.t_first_ns = r.rx.last_ns;
            }
            rec.t_last_ns = r.rx.last_ns;
            rec.delivered += 1;
            rec.bytes_delivered += r.bundle.payload.len() as u64;
        }
        self.client.close();
        Ok(rec)
    }
}

/// Adds a route on the node at `node`.
pub fn add_route(node: &str, prefix: &str, next_hop: &str) -> Result<(), AppError> {
    let mut c = AppClient::connect(node, "dtn://control/contact")?;
    c.control(&format!("route {prefix} {next_hop}"))?;
    c.close();
    Ok(())
}

/// Asks the node at `node` to shut down.
pub fn stop_node(node: &str) -> Result<(), AppError> {
    let mut c = AppClient::connect(node, "dtn://control/stop")?;
    c.control("shutdown")?;
    c.close();
    Ok(())
}
