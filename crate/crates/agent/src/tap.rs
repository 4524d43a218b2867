//! Frame taps: TCP relays placed in front of an implementation's
//! convergence-layer port that timestamp length-prefixed frames
//! (`len:u32be ‖ body`) as they pass.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use comet_core::clock::monotonic_ns;
use log::debug;

/// Boundary timestamps of one frame travelling client → target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TappedFrame {
    pub len: u32,
    /// When the chunk holding the frame's first byte was read.
    pub first_ns: u64,
    /// When the frame's last byte had been handed to the target.
    pub last_ns: u64,
}

/// Incremental frame boundary tracker.
#[derive(Debug, Default)]
pub struct FrameParser {
    header: Vec<u8>,
    in_body: bool,
    len: u32,
    remaining: u64,
    first_ns: u64,
}

impl FrameParser {
    /// Feeds a chunk read at `read_ns` and forwarded by `written_ns`;
    /// returns frames completed inside it.
    pub fn feed(&mut self, mut chunk: &[u8], read_ns: u64, written_ns: u64) -> Vec<TappedFrame> {
        let mut done = Vec::new();
        while !chunk.is_empty() {
            if self.in_body {
                let take = (self.remaining as usize).min(chunk.len());
                chunk = &chunk[take..];
                self.remaining -= take as u64;
            } else {
                if self.header.is_empty() {
                    self.first_ns = read_ns;
                }
                let take = (4 - self.header.len()).min(chunk.len());
                self.header.extend_from_slice(&chunk[..take]);
                chunk = &chunk[take..];
                if self.header.len() < 4 {
                    continue;
                }
                self.len = u32::from_be_bytes([self.header[0], self.header[1], self.header[2], self.header[3]]);
                self.header.clear();
                self.remaining = self.len as u64;
                self.in_body = true;
            }
            if self.in_body && self.remaining == 0 {
                self.in_body = false;
                done.push(TappedFrame {
                    len: self.len,
                    first_ns: self.first_ns,
                    last_ns: written_ns,
                });
            }
        }
        done
    }
}

/// A listening tap forwarding every accepted connection to `target`.
pub struct FrameTap {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    frames: Arc<Mutex<Vec<TappedFrame>>>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<thread::JoinHandle<()>>,
}

impl FrameTap {
    pub fn start(bind: &str, target: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let frames = Arc::new(Mutex::new(Vec::new()));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let acceptor = {
            let (stop, frames, conns) = (Arc::clone(&stop), Arc::clone(&frames), Arc::clone(&conns));
            let target = target.to_string();
            thread::Builder::new()
                .name("tap-accept".into())
                .spawn(move || accept_loop(listener, &target, &stop, &frames, &conns))?
        };
        Ok(Self {
            addr,
            stop,
            frames,
            conns,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Removes and returns frames seen so far, in completion order.
    pub fn take(&self) -> Vec<TappedFrame> {
        std::mem::take(&mut *self.frames.lock().expect("frames lock"))
    }

    pub fn count(&self, min_len: u32) -> usize {
        self.frames
            .lock()
            .expect("frames lock")
            .iter()
            .filter(|f| f.len >= min_len)
            .count()
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for c in self.conns.lock().expect("conns lock").drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for FrameTap {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    target: &str,
    stop: &AtomicBool,
    frames: &Arc<Mutex<Vec<TappedFrame>>>,
    conns: &Arc<Mutex<Vec<TcpStream>>>,
) {
    for incoming in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let Ok(client) = incoming else { continue };
        let upstream = match TcpStream::connect(target) {
            Ok(s) => s,
            Err(e) => {
                debug!("tap: cannot reach {target}: {e}");
                continue;
            }
        };
        let _ = client.set_nodelay(true);
        let _ = upstream.set_nodelay(true);
        let pair = (
            client.try_clone(),
            upstream.try_clone(),
            client.try_clone(),
            upstream.try_clone(),
        );
        let (Ok(c_read), Ok(u_write), Ok(c_write), Ok(u_read)) = pair else {
            continue;
        };
        {
            let mut held = conns.lock().expect("conns lock");
            held.push(client);
            held.push(upstream);
        }
        let frames = Arc::clone(frames);
        let _ = thread::Builder::new()
            .name("tap-fwd".into())
            .spawn(move || pump_frames(c_read, u_write, &frames));
        let _ = thread::Builder::new()
            .name("tap-back".into())
            .spawn(move || pump_raw(u_read, c_write));
    }
}

fn pump_frames(mut from: TcpStream, mut to: TcpStream, frames: &Mutex<Vec<TappedFrame>>) {
    let mut parser = FrameParser::default();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        let read_ns = monotonic_ns();
        if to.write_all(&buf[..n]).is_err() {
            break;
        }
        let written_ns = monotonic_ns();
        let done = parser.feed(&buf[..n], read_ns, written_ns);
        if !done.is_empty() {
            frames.lock().expect("frames lock").extend(done);
        }
    }
    let _ = to.shutdown(Shutdown::Write);
}

fn pump_raw(mut from: TcpStream, mut to: TcpStream) {
    let _ = io::copy(&mut from, &mut to);
    let _ = to.shutdown(Shutdown::Write);
}
