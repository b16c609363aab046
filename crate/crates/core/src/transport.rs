//! Length-prefixed PDU framing over TCP or an in-process loopback.
//!
//! A frame is `[length:4][encoded pdu]` with a big-endian length. Receivers
//! buffer partial frames across timeouts, so a `recv` that times out can be
//! retried without losing bytes.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::pdu::{CodecError, Pdu, MAX_PDU_LEN};

pub const CONTROLLER_PORT: u16 = 7077;
pub const CLONE_PORT: u16 = 7078;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(5000);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot bind {endpoint}: {reason}")]
    BindFailure { endpoint: Endpoint, reason: String },
    #[error("cannot connect to {endpoint}: {reason}")]
    ConnectFailure { endpoint: Endpoint, reason: String },
    #[error("connection closed")]
    ConnectionClosed,
    #[error("timed out")]
    Timeout,
    #[error("frame of {0} bytes exceeds the 16 MiB cap")]
    Oversize(usize),
    #[error("invalid endpoint {0:?}")]
    InvalidEndpoint(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Result<Self, TransportError> {
        let host = host.into();
        if port == 0 {
            return Err(TransportError::InvalidEndpoint(format!("{host}:0")));
        }
        Ok(Endpoint { host, port })
    }

    pub fn localhost(port: u16) -> Self {
        Endpoint::new("127.0.0.1", port).expect("port must be non-zero")
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl FromStr for Endpoint {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| TransportError::InvalidEndpoint(s.to_string()))?;
        let port = port
            .parse()
            .map_err(|_| TransportError::InvalidEndpoint(s.to_string()))?;
        Endpoint::new(host, port)
    }
}

enum ReadOutcome {
    Data(usize),
    Timeout,
    Closed,
}

trait ByteStream: Send + Sync {
    fn write_all(&self, bytes: &[u8]) -> Result<(), TransportError>;
    fn read_some(&self, buf: &mut [u8], timeout: Duration) -> Result<ReadOutcome, TransportError>;
    fn close(&self);
}

struct Inner {
    stream: Box<dyn ByteStream>,
    writer: Mutex<()>,
    reader: Mutex<Vec<u8>>,
    local: String,
    peer: String,
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.stream.close();
    }
}

/// A bidirectional PDU connection. Clones share the same underlying stream;
/// the stream closes when the last clone is dropped or [`Connection::close`]
/// is called.
#[derive(Clone)]
pub struct Connection {
    inner: Arc<Inner>,
}

impl fmt::Debug for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Connection")
            .field("peer", &self.inner.peer)
            .finish()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Connection {
    fn from_stream(stream: Box<dyn ByteStream>, local: String, peer: String) -> Self {
        Connection {
            inner: Arc::new(Inner {
                stream,
                writer: Mutex::new(()),
                reader: Mutex::new(Vec::new()),
                local,
                peer,
            }),
        }
    }

    /// Identity of the remote end. Equals the remote's [`Connection::local`].
    pub fn peer(&self) -> &str {
        &self.inner.peer
    }

    /// Identity of this end as the remote sees it.
    pub fn local(&self) -> &str {
        &self.inner.local
    }

    /// Writes one frame. Frames from concurrent senders never interleave.
    pub fn send(&self, pdu: &Pdu) -> Result<(), TransportError> {
        let payload = pdu.encode()?;
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        frame.extend_from_slice(&payload);
        let _guard = lock(&self.inner.writer);
        self.inner.stream.write_all(&frame)
    }

    /// Waits up to `timeout` for the next complete frame.
    pub fn recv(&self, timeout: Duration) -> Result<Pdu, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut buf = lock(&self.inner.reader);
        let mut chunk = [0u8; 8192];
        loop {
            if buf.len() >= 4 {
                let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
                if len > MAX_PDU_LEN {
                    return Err(TransportError::Oversize(len));
                }
                if buf.len() >= 4 + len {
                    let result = Pdu::decode(&buf[4..4 + len]);
                    buf.drain(..4 + len);
                    return Ok(result?);
                }
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(TransportError::Timeout);
            }
            match self.inner.stream.read_some(&mut chunk, remaining)? {
                ReadOutcome::Data(n) => buf.extend_from_slice(&chunk[..n]),
                ReadOutcome::Timeout => return Err(TransportError::Timeout),
                ReadOutcome::Closed => return Err(TransportError::ConnectionClosed),
            }
        }
    }

    /// Writes raw bytes, bypassing framing. Test hook for partial frames.
    #[doc(hidden)]
    pub fn send_raw(&self, bytes: &[u8]) -> Result<(), TransportError> {
        let _guard = lock(&self.inner.writer);
        self.inner.stream.write_all(bytes)
    }

    pub fn close(&self) {
        self.inner.stream.close();
    }
}

// ---------------------------------------------------------------------------
// TCP

struct TcpByteStream {
    read: Mutex<TcpStream>,
    write: Mutex<TcpStream>,
    closed: AtomicBool,
}

impl ByteStream for TcpByteStream {
    fn write_all(&self, bytes: &[u8]) -> Result<(), TransportError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(TransportError::ConnectionClosed);
        }
        lock(&self.write).write_all(bytes).map_err(|e| match e.kind() {
            io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::NotConnected => TransportError::ConnectionClosed,
            _ => TransportError::Io(e),
        })
    }

    fn read_some(&self, buf: &mut [u8], timeout: Duration) -> Result<ReadOutcome, TransportError> {
        if self.closed.load(Ordering::SeqCst) {
            return Ok(ReadOutcome::Closed);
        }
        let mut stream = lock(&self.read);
        stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        match stream.read(buf) {
            Ok(0) => Ok(ReadOutcome::Closed),
            Ok(n) => Ok(ReadOutcome::Data(n)),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Ok(ReadOutcome::Timeout)
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => Ok(ReadOutcome::Data(0)),
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted
                ) =>
            {
                Ok(ReadOutcome::Closed)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn close(&self) {
        if !self.closed.swap(true, Ordering::SeqCst) {
            // The write half is never held across a blocking call for long, the
            // read half may be; shutting down through the write handle wakes both.
            let _ = lock(&self.write).shutdown(Shutdown::Both);
        }
    }
}

fn tcp_connection(stream: TcpStream) -> Result<Connection, TransportError> {
    stream.set_nodelay(true)?;
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "tcp-peer".into());
    let local = stream
        .local_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "tcp-local".into());
    let read = stream.try_clone()?;
    Ok(Connection::from_stream(
        Box::new(TcpByteStream {
            read: Mutex::new(read),
            write: Mutex::new(stream),
            closed: AtomicBool::new(false),
        }),
        local,
        peer,
    ))
}

// ---------------------------------------------------------------------------
// Loopback

#[derive(Default)]
struct PipeState {
    bytes: VecDeque<u8>,
    closed: bool,
}

#[derive(Default)]
struct Pipe {
    state: Mutex<PipeState>,
    ready: Condvar,
}

impl Pipe {
    fn close(&self) {
        lock(&self.state).closed = true;
        self.ready.notify_all();
    }
}

struct LoopbackStream {
    rx: Arc<Pipe>,
    tx: Arc<Pipe>,
}

impl ByteStream for LoopbackStream {
    fn write_all(&self, bytes: &[u8]) -> Result<(), TransportError> {
        let mut state = lock(&self.tx.state);
        if state.closed {
            return Err(TransportError::ConnectionClosed);
        }
        state.bytes.extend(bytes);
        self.tx.ready.notify_all();
        Ok(())
    }

    fn read_some(&self, buf: &mut [u8], timeout: Duration) -> Result<ReadOutcome, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut state = lock(&self.rx.state);
        loop {
            if !state.bytes.is_empty() {
                let n = buf.len().min(state.bytes.len());
                for (dst, src) in buf.iter_mut().zip(state.bytes.drain(..n)) {
                    *dst = src;
                }
                return Ok(ReadOutcome::Data(n));
            }
            if state.closed {
                return Ok(ReadOutcome::Closed);
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Ok(ReadOutcome::Timeout);
            }
            state = self
                .rx
                .ready
                .wait_timeout(state, remaining)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn close(&self) {
        self.rx.close();
        self.tx.close();
    }
}

fn loopback_streams() -> (LoopbackStream, LoopbackStream) {
    let a_to_b = Arc::new(Pipe::default());
    let b_to_a = Arc::new(Pipe::default());
    let a = LoopbackStream {
        rx: b_to_a.clone(),
        tx: a_to_b.clone(),
    };
    let b = LoopbackStream {
        rx: a_to_b,
        tx: b_to_a,
    };
    (a, b)
}

/// Returns two connected in-process endpoints.
pub fn loopback_pair() -> (Connection, Connection) {
    let (a, b) = loopback_streams();
    (
        Connection::from_stream(Box::new(a), "loopback-a".into(), "loopback-b".into()),
        Connection::from_stream(Box::new(b), "loopback-b".into(), "loopback-a".into()),
    )
}

/// Registry of in-process listeners, keyed by endpoint.
#[derive(Clone, Default)]
pub struct LoopbackNet {
    listeners: Arc<Mutex<HashMap<Endpoint, mpsc::Sender<Connection>>>>,
    next_peer: Arc<AtomicU64>,
}

impl LoopbackNet {
    pub fn new() -> Self {
        Self::default()
    }
}

// ---------------------------------------------------------------------------
// Network facade

/// Where connections come from: real TCP sockets or the in-process loopback.
#[derive(Clone)]
pub enum Network {
    Tcp,
    Loopback(LoopbackNet),
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Network::Tcp => f.write_str("Network::Tcp"),
            Network::Loopback(_) => f.write_str("Network::Loopback"),
        }
    }
}

impl Network {
    pub fn loopback() -> Self {
        Network::Loopback(LoopbackNet::new())
    }

    pub fn listen(&self, endpoint: &Endpoint) -> Result<Listener, TransportError> {
        match self {
            Network::Tcp => {
                let addr = resolve(endpoint).map_err(|reason| TransportError::BindFailure {
                    endpoint: endpoint.clone(),
                    reason,
                })?;
                let listener =
                    TcpListener::bind(addr).map_err(|e| TransportError::BindFailure {
                        endpoint: endpoint.clone(),
                        reason: e.to_string(),
                    })?;
                listener.set_nonblocking(true)?;
                Ok(Listener {
                    endpoint: endpoint.clone(),
                    kind: ListenerKind::Tcp(listener),
                })
            }
            Network::Loopback(net) => {
                let mut listeners = lock(&net.listeners);
                if listeners.contains_key(endpoint) {
                    return Err(TransportError::BindFailure {
                        endpoint: endpoint.clone(),
                        reason: "address in use".into(),
                    });
                }
                let (tx, rx) = mpsc::channel();
                listeners.insert(endpoint.clone(), tx);
                Ok(Listener {
                    endpoint: endpoint.clone(),
                    kind: ListenerKind::Loopback {
                        net: net.clone(),
                        incoming: Mutex::new(rx),
                    },
                })
            }
        }
    }

    /// Connects once, without retrying.
    pub fn connect(&self, endpoint: &Endpoint) -> Result<Connection, TransportError> {
        let fail = |reason: String| TransportError::ConnectFailure {
            endpoint: endpoint.clone(),
            reason,
        };
        match self {
            Network::Tcp => {
                let addr = resolve(endpoint).map_err(fail)?;
                let stream = TcpStream::connect_timeout(&addr, DEFAULT_TIMEOUT)
                    .map_err(|e| fail(e.to_string()))?;
                tcp_connection(stream)
            }
            Network::Loopback(net) => {
                let listeners = lock(&net.listeners);
                let tx = listeners
                    .get(endpoint)
                    .ok_or_else(|| fail("connection refused".into()))?;
                let (ours, theirs) = loopback_streams();
                let id = net.next_peer.fetch_add(1, Ordering::Relaxed);
                let client = format!("lo-{id}");
                let ours = Connection::from_stream(
                    Box::new(ours),
                    client.clone(),
                    endpoint.to_string(),
                );
                let theirs =
                    Connection::from_stream(Box::new(theirs), endpoint.to_string(), client);
                tx.send(theirs).map_err(|_| fail("listener gone".into()))?;
                Ok(ours)
            }
        }
    }

    /// Retries [`Network::connect`] until it succeeds or `timeout` elapses.
    pub fn connect_until(
        &self,
        endpoint: &Endpoint,
        timeout: Duration,
    ) -> Result<Connection, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.connect(endpoint) {
                Ok(conn) => return Ok(conn),
                Err(TransportError::ConnectFailure { .. }) => {
                    let remaining = deadline.saturating_duration_since(Instant::now());
                    if remaining.is_zero() {
                        return Err(TransportError::Timeout);
                    }
                    thread::sleep(remaining.min(Duration::from_millis(20)));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn resolve(endpoint: &Endpoint) -> Result<std::net::SocketAddr, String> {
    (endpoint.host.as_str(), endpoint.port)
        .to_socket_addrs()
        .map_err(|e| e.to_string())?
        .next()
        .ok_or_else(|| "no address".to_string())
}

enum ListenerKind {
    Tcp(TcpListener),
    Loopback {
        net: LoopbackNet,
        incoming: Mutex<mpsc::Receiver<Connection>>,
    },
}

/// Accepts incoming connections on one endpoint.
pub struct Listener {
    endpoint: Endpoint,
    kind: ListenerKind,
}

impl Listener {
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Waits up to `timeout` for a peer; `Ok(None)` when none arrived.
    pub fn accept(&self, timeout: Duration) -> Result<Option<Connection>, TransportError> {
        match &self.kind {
            ListenerKind::Tcp(listener) => {
                let deadline = Instant::now() + timeout;
                loop {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            stream.set_nonblocking(false)?;
                            return tcp_connection(stream).map(Some);
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            let remaining = deadline.saturating_duration_since(Instant::now());
                            if remaining.is_zero() {
                                return Ok(None);
                            }
                            thread::sleep(remaining.min(Duration::from_millis(5)));
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            ListenerKind::Loopback { incoming, .. } => {
                match lock(incoming).recv_timeout(timeout) {
                    Ok(conn) => Ok(Some(conn)),
                    Err(mpsc::RecvTimeoutError::Timeout) => Ok(None),
                    Err(mpsc::RecvTimeoutError::Disconnected) => {
                        Err(TransportError::ConnectionClosed)
                    }
                }
            }
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        if let ListenerKind::Loopback { net, .. } = &self.kind {
            lock(&net.listeners).remove(&self.endpoint);
        }
    }
}
