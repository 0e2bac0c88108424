//! Request/response transports between a device pipeline and the server.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::server::{Connection, Server};
use crate::wire::{read_frame, write_frame};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport i/o: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed by peer")]
    Closed,
}

/// Sends one frame and waits for the reply frame.
pub trait Transport: Send {
    fn roundtrip(&mut self, frame: &[u8]) -> Result<Vec<u8>, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn roundtrip(&mut self, frame: &[u8]) -> Result<Vec<u8>, TransportError> {
        (**self).roundtrip(frame)
    }
}

/// Direct call into a server connection, no serialization beyond framing.
pub struct InProcessTransport {
    conn: Connection,
    closed: bool,
}

impl InProcessTransport {
    pub fn new(server: &Arc<Server>) -> Self {
        Self { conn: server.connect(), closed: false }
    }
}

impl Transport for InProcessTransport {
    fn roundtrip(&mut self, frame: &[u8]) -> Result<Vec<u8>, TransportError> {
        if self.closed {
            return Err(TransportError::Closed);
        }
        let reply = self.conn.handle(frame);
        self.closed = reply.close;
        Ok(reply.frame)
    }
}

pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }
}

impl Transport for TcpTransport {
    fn roundtrip(&mut self, frame: &[u8]) -> Result<Vec<u8>, TransportError> {
        write_frame(&mut self.writer, frame)?;
        match read_frame(&mut self.reader) {
            Ok(f) => Ok(f),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(TransportError::Closed),
            Err(e) => Err(e.into()),
        }
    }
}

/// Serve connections on `listener`, one thread per session. Returns once
/// `max_sessions` sessions have finished (never, when `None`).
pub fn serve(server: Arc<Server>, listener: TcpListener, max_sessions: Option<usize>) -> io::Result<()> {
    let finished = Arc::new(AtomicUsize::new(0));
    let mut handles = Vec::new();
    for (accepted, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let server = Arc::clone(&server);
        let finished = Arc::clone(&finished);
        handles.push(thread::spawn(move || {
            // A broken connection only ends its own session.
            let _ = serve_connection(&server, stream);
            finished.fetch_add(1, Ordering::SeqCst);
        }));
        if max_sessions.is_some_and(|m| accepted + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

/// Bind an ephemeral local port and serve in the background.
pub fn spawn_local(server: Arc<Server>, max_sessions: Option<usize>) -> io::Result<(SocketAddr, thread::JoinHandle<io::Result<()>>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    Ok((addr, thread::spawn(move || serve(server, listener, max_sessions))))
}

fn serve_connection(server: &Arc<Server>, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut conn = server.connect();
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let reply = conn.handle(&frame);
        write_frame(&mut writer, &reply.frame)?;
        if reply.close {
            return Ok(());
        }
    }
}

/// Token bucket shared by every transport that should count against one
/// bandwidth cap. Tokens may go negative; the caller then sleeps off the debt,
/// so a large frame is paced as a whole rather than rejected.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    /// `rate` in bytes per second; the burst allowance is 50 ms worth.
    pub fn new(rate: f64) -> Arc<Self> {
        assert!(rate > 0.0 && rate.is_finite(), "bandwidth cap must be positive");
        let burst = rate * 0.05;
        Arc::new(Self { rate, burst, state: Mutex::new((burst, Instant::now())) })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Wait until `bytes` may pass.
    pub fn take(&self, bytes: usize) {
        let wait = {
            let mut st = self.state.lock().expect("bucket lock");
            let now = Instant::now();
            let refill = now.duration_since(st.1).as_secs_f64() * self.rate;
            st.0 = (st.0 + refill).min(self.burst) - bytes as f64;
            st.1 = now;
            if st.0 < 0.0 {
                -st.0 / self.rate
            } else {
                0.0
            }
        };
        if wait > 0.0 {
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Paces both directions of `inner` through a shared bucket.
pub struct ThrottledTransport<T> {
    inner: T,
    bucket: Arc<TokenBucket>,
}

impl<T: Transport> ThrottledTransport<T> {
    pub fn new(inner: T, bucket: Arc<TokenBucket>) -> Self {
        Self { inner, bucket }
    }
}

impl<T: Transport> Transport for ThrottledTransport<T> {
    fn roundtrip(&mut self, frame: &[u8]) -> Result<Vec<u8>, TransportError> {
        self.bucket.take(frame.len());
        let reply = self.inner.roundtrip(frame)?;
        self.bucket.take(reply.len());
        Ok(reply)
    }
}

/// Fails selected calls before they reach `inner`; used to exercise retries.
pub struct FlakyTransport<T> {
    inner: T,
    fail: Box<dyn FnMut(usize) -> bool + Send>,
    calls: usize,
}

impl<T: Transport> FlakyTransport<T> {
    /// `fail(n)` decides whether the n-th call (0-based) is dropped.
    pub fn new(inner: T, fail: impl FnMut(usize) -> bool + Send + 'static) -> Self {
        Self { inner, fail: Box::new(fail), calls: 0 }
    }
}

impl<T: Transport> Transport for FlakyTransport<T> {
    fn roundtrip(&mut self, frame: &[u8]) -> Result<Vec<u8>, TransportError> {
        let n = self.calls;
        self.calls += 1;
        if (self.fail)(n) {
            return Err(TransportError::Io(io::Error::new(io::ErrorKind::ConnectionReset, "injected failure")));
        }
        self.inner.roundtrip(frame)
    }
}
