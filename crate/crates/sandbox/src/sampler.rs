//! Periodic CPU and memory sampling of an environment's processes.
//!
//! Samples are appended to a CSV file one line at a time, so a stream
//! that ends abruptly still leaves a valid file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::Duration;

use comet_core::clock::monotonic_ns;
use comet_core::records::RESOURCE_HEADER;
use comet_core::ResourceSample;
use log::info;

use crate::procfs;

pub const DEFAULT_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerReport {
    pub path: PathBuf,
    pub samples: u64,
    /// The stream ended because the environment disappeared.
    pub env_gone: bool,
}

/// Handle to a running sampler thread.
pub struct Sampler {
    stop: Sender<()>,
    handle: JoinHandle<io::Result<SamplerReport>>,
}

/// Per-pid CPU bookkeeping between samples.
#[derive(Default)]
struct CpuState {
    ticks: HashMap<i32, u64>,
}

impl CpuState {
    /// Ticks consumed since the previous call by the processes in `pids`.
    /// A process seen for the first time contributes its whole lifetime.
    fn delta(&mut self, pids: &[i32]) -> u64 {
        let mut next = HashMap::with_capacity(pids.len());
        let mut delta = 0;
        for &pid in pids {
            if let Some(st) = procfs::read_stat(pid) {
                let prev = self.ticks.get(&pid).copied().unwrap_or(0);
                delta += st.cpu_ticks.saturating_sub(prev);
                next.insert(pid, st.cpu_ticks);
            }
        }
        self.ticks = next;
        delta
    }
}

fn memory(pids: &[i32]) -> (u64, Option<u64>) {
    let mut rss = 0;
    let mut anon = Some(0u64);
    for &pid in pids {
        if let Some(m) = procfs::read_mem(pid) {
            rss += m.rss;
            anon = match (anon, m.rss_anon) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            };
        }
    }
    (rss, anon)
}

fn csv_line(s: &ResourceSample) -> String {
    let nocache = s.mem_bytes_nocache.map(|v| v.to_string()).unwrap_or_default();
    format!("{},{:.3},{},{}\n", s.t_ns, s.cpu_pct, s.mem_bytes, nocache)
}

impl Sampler {
    /// Starts sampling every `interval` into `path` (truncated).
    ///
    /// `pids` is called once per sample and returns the processes to
    /// account for, or `None` once the environment is gone.
    pub fn start<F>(pids: F, interval: Duration, path: &Path) -> io::Result<Self>
    where
        F: FnMut() -> Option<Vec<i32>> + Send + 'static,
    {
        let mut file = File::create(path)?;
        file.write_all(format!("{}\n", RESOURCE_HEADER.join(",")).as_bytes())?;
        let (tx, rx) = mpsc::channel();
        let path = path.to_path_buf();
        let handle = std::thread::Builder::new()
            .name("sampler".into())
            .spawn(move || run(pids, interval, file, path, rx))?;
        Ok(Self { stop: tx, handle })
    }

    pub fn is_finished(&self) -> bool {
        self.handle.is_finished()
    }

    /// Stops sampling and returns what was written.
    pub fn stop(self) -> io::Result<SamplerReport> {
        let _ = self.stop.send(());
        self.handle
            .join()
            .unwrap_or_else(|_| Err(io::Error::other("sampler thread panicked")))
    }
}

fn run<F>(
    mut pids: F,
    interval: Duration,
    mut file: File,
    path: PathBuf,
    stop: mpsc::Receiver<()>,
) -> io::Result<SamplerReport>
where
    F: FnMut() -> Option<Vec<i32>>,
{
    let hz = procfs::clock_ticks_per_sec() as f64;
    let interval_ns = interval.as_nanos().max(1) as u64;
    let mut report = SamplerReport {
        path,
        samples: 0,
        env_gone: false,
    };
    let mut cpu = CpuState::default();
    let Some(initial) = pids() else {
        report.env_gone = true;
        info!("sampler: environment gone before the first sample");
        return Ok(report);
    };
    cpu.delta(&initial);
    let origin = monotonic_ns();
    let mut last_t = origin;
    let mut k: u64 = 1;
    loop {
        let due = origin + k * interval_ns;
        let now = monotonic_ns();
        if due > now {
            match stop.recv_timeout(Duration::from_nanos(due - now)) {
                Err(RecvTimeoutError::Timeout) => {}
                _ => return Ok(report),
            }
        }
        let Some(current) = pids() else {
            report.env_gone = true;
            info!("sampler: environment gone after {} samples", report.samples);
            return Ok(report);
        };
        let ticks = cpu.delta(&current);
        let (mem, nocache) = memory(&current);
        let t = monotonic_ns().max(last_t + 1);
        let wall_s = (t - last_t) as f64 / 1e9;
        let sample = ResourceSample {
            t_ns: t,
            cpu_pct: ticks as f64 / hz / wall_s * 100.0,
            mem_bytes: mem,
            mem_bytes_nocache: nocache,
        };
        file.write_all(csv_line(&sample).as_bytes())?;
        report.samples += 1;
        last_t = t;
        // Skip slots that were missed entirely instead of bursting.
        k = ((t - origin) / interval_ns).max(k) + 1;
    }
}
