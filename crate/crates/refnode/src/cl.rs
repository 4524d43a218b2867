//! TCP convergence layer: each frame is `len:u32be` followed by one encoded
//! bundle.
//!
//! The length prefix and the bundle go out as two separate writes, the way
//! a straightforward implementation would emit them. Without `no_delay` the
//! second write is subject to Nagle's algorithm.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::os::fd::AsRawFd;
use std::time::Duration;

use comet_core::clock::monotonic_ns;
use comet_core::TimingEvent;
use thiserror::Error;

use crate::bundle::{decode_bundle, encode_bundle, Bundle, DecodeError, EncodeError, DEFAULT_MAX_PAYLOAD};
use crate::logsink::TimingSink;

/// Frame limit: maximum payload plus generous room for the block headers.
pub const MAX_FRAME: usize = DEFAULT_MAX_PAYLOAD + 4096;

#[derive(Debug, Error)]
pub enum ClError {
    #[error("cannot connect to {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("peer closed the connection mid-frame ({got} of {want} bytes)")]
    ClosedMidFrame { got: usize, want: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("undecodable bundle: {0}")]
    Decode(DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Monotonic timestamps of a frame's first and last byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameTimes {
    pub first_ns: u64,
    pub last_ns: u64,
}

#[derive(Debug, Clone)]
pub struct Received {
    pub bundle: Bundle,
    pub rx: FrameTimes,
}

/// A frame whose non-blocking send stopped early; see
/// [`ClConnection::try_send_bundle`].
#[derive(Debug)]
pub struct Pending {
    bundle_id: String,
    header: [u8; 4],
    header_sent: usize,
    body: Vec<u8>,
    body_sent: usize,
    first_ns: u64,
}

#[derive(Debug)]
pub struct ClConnection {
    stream: TcpStream,
    peer: SocketAddr,
    no_delay: bool,
    max_frame: usize,
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

impl ClConnection {
    pub fn connect(addr: &str, no_delay: bool) -> Result<Self, ClError> {
        let connect_err = |source| ClError::Connect {
            addr: addr.to_string(),
            source,
        };
        let mut last = io::Error::new(ErrorKind::InvalidInput, "address resolved to nothing");
        for sa in addr.to_socket_addrs().map_err(connect_err)? {
            match TcpStream::connect_timeout(&sa, Duration::from_secs(5)) {
                Ok(s) => return Self::from_stream(s, no_delay).map_err(ClError::Io),
                Err(e) => last = e,
            }
        }
        Err(connect_err(last))
    }

    pub fn from_stream(stream: TcpStream, no_delay: bool) -> io::Result<Self> {
        stream.set_nodelay(no_delay)?;
        let peer = stream.peer_addr()?;
        Ok(Self {
            stream,
            peer,
            no_delay,
            max_frame: MAX_FRAME,
        })
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn stream(&self) -> &TcpStream {
        &self.stream
    }

    pub fn no_delay(&self) -> bool {
        self.no_delay
    }

    pub fn set_no_delay(&mut self, on: bool) -> io::Result<()> {
        self.stream.set_nodelay(on)?;
        self.no_delay = on;
        Ok(())
    }

    pub fn try_clone(&self) -> io::Result<Self> {
        Ok(Self {
            stream: self.stream.try_clone()?,
            peer: self.peer,
            no_delay: self.no_delay,
            max_frame: self.max_frame,
        })
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(t)
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    pub fn send_frame(&mut self, body: &[u8]) -> Result<FrameTimes, ClError> {
        if body.len() > self.max_frame {
            return Err(ClError::FrameTooLarge(body.len()));
        }
        let header = (body.len() as u32).to_be_bytes();
        let first_ns = monotonic_ns();
        self.stream.write_all(&header)?;
        self.stream.write_all(body)?;
        Ok(FrameTimes {
            first_ns,
            last_ns: monotonic_ns(),
        })
    }

    /// Reads into `buf`; `Ok(false)` on EOF before any byte when
    /// `eof_ok` holds.
    fn fill(&mut self, buf: &mut [u8], eof_ok: bool, first: &mut Option<u64>) -> Result<bool, ClError> {
        let mut got = 0;
        while got < buf.len() {
            match self.stream.read(&mut buf[got..]) {
                Ok(0) if got == 0 && eof_ok => return Ok(false),
                Ok(0) => {
                    return Err(ClError::ClosedMidFrame {
                        got,
                        want: buf.len(),
                    })
                }
                Ok(n) => {
                    first.get_or_insert_with(monotonic_ns);
                    got += n;
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                // A timeout only ends the wait between frames.
                Err(e) if is_timeout(&e) && first.is_none() => return Err(ClError::Timeout),
                Err(e) if is_timeout(&e) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(true)
    }

    /// Next frame, or `None` on a clean close between frames.
    pub fn recv_frame(&mut self) -> Result<Option<(Vec<u8>, FrameTimes)>, ClError> {
        let mut first = None;
        let mut header = [0u8; 4];
        if !self.fill(&mut header, true, &mut first)? {
            return Ok(None);
        }
        let len = u32::from_be_bytes(header) as usize;
        if len > self.max_frame {
            return Err(ClError::FrameTooLarge(len));
        }
        let mut body = vec![0u8; len];
        self.fill(&mut body, false, &mut first).map_err(|e| match e {
            ClError::ClosedMidFrame { got, .. } => ClError::ClosedMidFrame {
                got: got + 4,
                want: len + 4,
            },
            other => other,
        })?;
        let last_ns = monotonic_ns();
        Ok(Some((
            body,
            FrameTimes {
                first_ns: first.expect("header bytes were read"),
                last_ns,
            },
        )))
    }

    /// Encodes and sends `b`, logging ser and tx events.
    pub fn send_bundle(&mut self, b: &Bundle, sink: &TimingSink) -> Result<FrameTimes, ClError> {
        let ser_start = monotonic_ns();
        let bytes = encode_bundle(b, DEFAULT_MAX_PAYLOAD)?;
        let ser_end = monotonic_ns();
        let tx = self.send_frame(&bytes)?;
        if sink.is_enabled() {
            let id = b.id();
            sink.log_at(&id, TimingEvent::SerStart, ser_start);
            sink.log_at(&id, TimingEvent::SerEnd, ser_end);
            sink.log_at(&id, TimingEvent::TxFirstByte, tx.first_ns);
            sink.log_at(&id, TimingEvent::TxLastByte, tx.last_ns);
        }
        Ok(tx)
    }

    /// One `send` that never blocks. `Ok(0)` when the socket buffer is full.
    fn send_now(&self, buf: &[u8]) -> io::Result<usize> {
        loop {
            // SAFETY: `buf` is a valid slice for the duration of the call.
            let n = unsafe {
                libc::send(
                    self.stream.as_raw_fd(),
                    buf.as_ptr().cast(),
                    buf.len(),
                    libc::MSG_DONTWAIT | libc::MSG_NOSIGNAL,
                )
            };
            if n >= 0 {
                return Ok(n as usize);
            }
            let e = io::Error::last_os_error();
            match e.kind() {
                ErrorKind::Interrupted => continue,
                ErrorKind::WouldBlock => return Ok(0),
                _ => return Err(e),
            }
        }
    }

    /// Like [`ClConnection::send_bundle`] but stops instead of blocking.
    /// Returns the unsent rest, which [`ClConnection::finish`] completes.
    /// The socket itself stays in blocking mode for other users.
    pub fn try_send_bundle(&mut self, b: &Bundle, sink: &TimingSink) -> Result<Option<Pending>, ClError> {
        let ser_start = monotonic_ns();
        let body = encode_bundle(b, DEFAULT_MAX_PAYLOAD)?;
        let ser_end = monotonic_ns();
        if body.len() > self.max_frame {
            return Err(ClError::FrameTooLarge(body.len()));
        }
        let id = if sink.is_enabled() { b.id() } else { String::new() };
        let mut p = Pending {
            bundle_id: id,
            header: (body.len() as u32).to_be_bytes(),
            header_sent: 0,
            body,
            body_sent: 0,
            first_ns: monotonic_ns(),
        };
        if sink.is_enabled() {
            sink.log_at(&p.bundle_id, TimingEvent::SerStart, ser_start);
            sink.log_at(&p.bundle_id, TimingEvent::SerEnd, ser_end);
            sink.log_at(&p.bundle_id, TimingEvent::TxFirstByte, p.first_ns);
        }
        while p.header_sent < 4 {
            match self.send_now(&p.header[p.header_sent..])? {
                0 => return Ok(Some(p)),
                n => p.header_sent += n,
            }
        }
        while p.body_sent < p.body.len() {
            match self.send_now(&p.body[p.body_sent..])? {
                0 => return Ok(Some(p)),
                n => p.body_sent += n,
            }
        }
        sink.log_now(&p.bundle_id, TimingEvent::TxLastByte);
        Ok(None)
    }

    /// Sends the rest of a frame started by [`ClConnection::try_send_bundle`].
    pub fn finish(&mut self, p: Pending, sink: &TimingSink) -> Result<FrameTimes, ClError> {
        self.stream.write_all(&p.header[p.header_sent..])?;
        self.stream.write_all(&p.body[p.body_sent..])?;
        let last_ns = monotonic_ns();
        sink.log_at(&p.bundle_id, TimingEvent::TxLastByte, last_ns);
        Ok(FrameTimes {
            first_ns: p.first_ns,
            last_ns,
        })
    }

    /// Receives and decodes one bundle, logging rx and deser events.
    ///
    /// A frame that does not decode is consumed and reported as
    /// [`ClError::Decode`]; the connection stays usable.
    pub fn recv_bundle(&mut self, sink: &TimingSink) -> Result<Option<Received>, ClError> {
        let Some((bytes, rx)) = self.recv_frame()? else {
            return Ok(None);
        };
        let deser_start = monotonic_ns();
        let decoded = decode_bundle(&bytes);
        let deser_end = monotonic_ns();
        let bundle = decoded.map_err(ClError::Decode)?;
        if sink.is_enabled() {
            let id = bundle.id();
            sink.log_at(&id, TimingEvent::RxFirstByte, rx.first_ns);
            sink.log_at(&id, TimingEvent::RxLastByte, rx.last_ns);
            sink.log_at(&id, TimingEvent::DeserStart, deser_start);
            sink.log_at(&id, TimingEvent::DeserEnd, deser_end);
        }
        Ok(Some(Received { bundle, rx }))
    }
}
