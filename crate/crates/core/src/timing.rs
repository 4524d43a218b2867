//! Implementation timing logs.
//!
//! An adapter may point the framework at a log in which the implementation
//! records per-bundle events. Dialect `v1` is line oriented JSON:
//!
//! ```text
//! {"b":"dtn://sender/app:0:17","e":"deser_start","t":1234567}
//! ```
//!
//! where `t` is a `CLOCK_MONOTONIC` timestamp in nanoseconds. Not every
//! event has to be present: an implementation that parses while receiving
//! logs `deser_start`/`deser_end` around its receive loop and omits the
//! `rx_*` events, so receive-copy time lands in deserialization. One that
//! parses a complete buffer logs all eight and the copy shows up between
//! `rx_first_byte` and `rx_last_byte` instead.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingEvent {
    RxFirstByte,
    RxLastByte,
    DeserStart,
    DeserEnd,
    SerStart,
    SerEnd,
    TxFirstByte,
    TxLastByte,
}

impl TimingEvent {
    pub const ALL: [TimingEvent; 8] = [
        TimingEvent::RxFirstByte,
        TimingEvent::RxLastByte,
        TimingEvent::DeserStart,
        TimingEvent::DeserEnd,
        TimingEvent::SerStart,
        TimingEvent::SerEnd,
        TimingEvent::TxFirstByte,
        TimingEvent::TxLastByte,
    ];

    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TimingEvent::RxFirstByte => "rx_first_byte",
            TimingEvent::RxLastByte => "rx_last_byte",
            TimingEvent::DeserStart => "deser_start",
            TimingEvent::DeserEnd => "deser_end",
            TimingEvent::SerStart => "ser_start",
            TimingEvent::SerEnd => "ser_end",
            TimingEvent::TxFirstByte => "tx_first_byte",
            TimingEvent::TxLastByte => "tx_last_byte",
        }
    }
}

impl fmt::Display for TimingEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimingLogEntry {
    pub bundle_id: String,
    pub event: TimingEvent,
    pub t_ns: u64,
}

impl TimingLogEntry {
    /// One line of dialect v1, without the trailing newline.
    pub fn to_v1_line(&self) -> String {
        serde_json::json!({"b": self.bundle_id, "e": self.event, "t": self.t_ns}).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimingDialect {
    #[serde(rename = "v1")]
    V1,
}

impl FromStr for TimingDialect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "v1" | "jsonl-v1" => Ok(TimingDialect::V1),
            other => Err(format!("unknown timing-log dialect {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum TimingLogError {
    #[error("timing log {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("timing log line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Deserialize)]
struct V1Line {
    b: serde_json::Value,
    e: TimingEvent,
    t: u64,
}

/// Parse result: accepted entries plus what was dropped on the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingLog {
    /// Ordered by timestamp, ties broken by event rank.
    pub entries: Vec<TimingLogEntry>,
    /// Bundles discarded because their events were out of order or repeated.
    pub discarded: Vec<String>,
    pub warnings: Vec<String>,
}

fn parse_v1_line(line: &str) -> Result<TimingLogEntry, String> {
    let raw: V1Line = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let bundle_id = match raw.b {
        serde_json::Value::String(s) => s,
        serde_json::Value::Number(n) => n.to_string(),
        other => return Err(format!("bundle id must be a string or number, got {other}")),
    };
    Ok(TimingLogEntry {
        bundle_id,
        event: raw.e,
        t_ns: raw.t,
    })
}

/// Parses a timing log held in memory.
///
/// In strict mode the first malformed line is an error; otherwise it is
/// skipped with a warning. Bundles whose events violate the event order
/// (or repeat an event) are always dropped with a warning.
pub fn parse_timing_log_str(
    text: &str,
    dialect: TimingDialect,
    strict: bool,
) -> Result<TimingLog, TimingLogError> {
    let TimingDialect::V1 = dialect;
    let mut log = TimingLog::default();
    let mut per_bundle: HashMap<String, Vec<TimingLogEntry>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match parse_v1_line(trimmed) {
            Ok(entry) => per_bundle.entry(entry.bundle_id.clone()).or_default().push(entry),
            Err(reason) if strict => {
                return Err(TimingLogError::Malformed { line: i + 1, reason })
            }
            Err(reason) => log.warnings.push(format!("line {}: {reason}", i + 1)),
        }
    }

    let mut ids: Vec<String> = per_bundle.keys().cloned().collect();
    ids.sort();
    for id in ids {
        let mut events = per_bundle.remove(&id).expect("key present");
        events.sort_by_key(|e| e.event.rank());
        let repeated = events.windows(2).any(|w| w[0].event == w[1].event);
        let out_of_order = events.windows(2).any(|w| w[0].t_ns > w[1].t_ns);
        if repeated || out_of_order {
            log.warnings.push(format!(
                "bundle {id}: {} events, discarded",
                if repeated { "repeated" } else { "out-of-order" }
            ));
            log.discarded.push(id);
            continue;
        }
        log.entries.extend(events);
    }
    log.entries
        .sort_by(|a, b| (a.t_ns, a.event.rank()).cmp(&(b.t_ns, b.event.rank())));
    Ok(log)
}

pub fn parse_timing_log(
    path: &Path,
    dialect: TimingDialect,
    strict: bool,
) -> Result<TimingLog, TimingLogError> {
    let text = std::fs::read_to_string(path).map_err(|source| TimingLogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_timing_log_str(&text, dialect, strict)
}

/// All events seen for one bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleTiming {
    pub bundle_id: String,
    events: [Option<u64>; 8],
}

impl BundleTiming {
    pub fn get(&self, event: TimingEvent) -> Option<u64> {
        self.events[event.rank()]
    }

    /// Earliest logged event.
    pub fn first_ns(&self) -> Option<u64> {
        self.events.iter().flatten().min().copied()
    }

    fn span(&self, from: TimingEvent, to: TimingEvent) -> Option<u64> {
        Some(self.get(to)?.saturating_sub(self.get(from)?))
    }

    pub fn deser_ns(&self) -> Option<u64> {
        self.span(TimingEvent::DeserStart, TimingEvent::DeserEnd)
    }

    pub fn ser_ns(&self) -> Option<u64> {
        self.span(TimingEvent::SerStart, TimingEvent::SerEnd)
    }

    /// Retention measured inside the implementation: last received byte to
    /// first transmitted byte.
    pub fn retention_ns(&self) -> Option<u64> {
        self.span(TimingEvent::RxLastByte, TimingEvent::TxFirstByte)
    }

    /// Earliest timestamp present, used to order bundles.
    pub fn first_seen(&self) -> u64 {
        self.events.iter().flatten().copied().min().unwrap_or(0)
    }
}

impl TimingLog {
    /// Groups entries per bundle, ordered by each bundle's first event.
    pub fn bundles(&self) -> Vec<BundleTiming> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut out: Vec<BundleTiming> = Vec::new();
        for e in &self.entries {
            let i = *index.entry(e.bundle_id.as_str()).or_insert_with(|| {
                out.push(BundleTiming {
                    bundle_id: e.bundle_id.clone(),
                    events: [None; 8],
                });
                out.len() - 1
            });
            out[i].events[e.event.rank()] = Some(e.t_ns);
        }
        out.sort_by_key(|b| b.first_seen());
        out
    }
}
