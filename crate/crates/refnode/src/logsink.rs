//! Serialized timing-log appender.
//!
//! Threads append events to a shared buffer without waking anybody; a
//! writer thread drains it as dialect v1 lines every [`FLUSH_PERIOD`], so
//! logging does not put an extra runnable thread next to the bundle path.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::mem;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use comet_core::clock::monotonic_ns;
use comet_core::{TimingEvent, TimingLogEntry};

pub const FLUSH_PERIOD: Duration = Duration::from_millis(20);

#[derive(Default)]
struct Shared {
    pending: Mutex<Vec<TimingLogEntry>>,
    stop: AtomicBool,
}

/// Cheap handle for logging events; a disabled sink drops everything.
#[derive(Clone, Default)]
pub struct TimingSink {
    shared: Option<Arc<Shared>>,
}

impl TimingSink {
    pub fn disabled() -> Self {
        Self { shared: None }
    }

    pub fn is_enabled(&self) -> bool {
        self.shared.is_some()
    }

    pub fn log_at(&self, bundle_id: &str, event: TimingEvent, t_ns: u64) {
        if let Some(shared) = &self.shared {
            shared.pending.lock().expect("timing buffer lock").push(TimingLogEntry {
                bundle_id: bundle_id.to_string(),
                event,
                t_ns,
            });
        }
    }

    pub fn log_now(&self, bundle_id: &str, event: TimingEvent) {
        if self.shared.is_some() {
            self.log_at(bundle_id, event, monotonic_ns());
        }
    }
}

/// Owns the writer thread. [`TimingWriter::finish`] drains and flushes.
pub struct TimingWriter {
    shared: Arc<Shared>,
    handle: Option<JoinHandle<io::Result<()>>>,
}

/// Opens (appending) the log at `path` and starts the writer thread.
pub fn open(path: &Path) -> io::Result<(TimingSink, TimingWriter)> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let shared = Arc::new(Shared::default());
    let worker = Arc::clone(&shared);
    let handle = thread::Builder::new()
        .name("timing-log".into())
        .spawn(move || write_loop(BufWriter::new(file), &worker))?;
    Ok((
        TimingSink {
            shared: Some(Arc::clone(&shared)),
        },
        TimingWriter {
            shared,
            handle: Some(handle),
        },
    ))
}

fn write_loop(mut out: BufWriter<File>, shared: &Shared) -> io::Result<()> {
    let mut batch = Vec::new();
    loop {
        let last = shared.stop.load(Ordering::SeqCst);
        mem::swap(&mut batch, &mut *shared.pending.lock().expect("timing buffer lock"));
        for e in batch.drain(..) {
            out.write_all(e.to_v1_line().as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        if last {
            return Ok(());
        }
        thread::park_timeout(FLUSH_PERIOD);
    }
}

impl TimingWriter {
    /// Writes everything logged so far, then stops the writer.
    pub fn finish(mut self) -> io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> io::Result<()> {
        self.shared.stop.store(true, Ordering::SeqCst);
        match self.handle.take() {
            Some(h) => {
                h.thread().unpark();
                h.join()
                    .unwrap_or_else(|_| Err(io::Error::other("timing-log writer panicked")))
            }
            None => Ok(()),
        }
    }
}

impl Drop for TimingWriter {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use comet_core::timing::{parse_timing_log, TimingDialect};

    #[test]
    fn lines_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.log");
        let (sink, writer) = open(&path).unwrap();
        let workers: Vec<_> = (0..4)
            .map(|w| {
                let sink = sink.clone();
                std::thread::spawn(move || {
                    for i in 0..100 {
                        let id = format!("b{w}-{i}");
                        for ev in TimingEvent::ALL {
                            sink.log_now(&id, ev);
                        }
                    }
                })
            })
            .collect();
        for w in workers {
            w.join().unwrap();
        }
        writer.finish().unwrap();
        let log = parse_timing_log(&path, TimingDialect::V1, true).unwrap();
        assert_eq!(log.entries.len(), 4 * 100 * 8);
        assert!(log.discarded.is_empty());
    }

    #[test]
    fn disabled_sink_is_silent() {
        let s = TimingSink::disabled();
        assert!(!s.is_enabled());
        s.log_now("x", TimingEvent::SerStart);
    }
}
