//! Duplex framed channel between the two parties.
//!
//! Wire format of one frame: `length: u32 LE` (payload bytes), `tag: u8`,
//! then the payload. Two endpoints are provided: an in-process channel backed
//! by crossbeam queues and a TCP channel whose writes are performed by a
//! dedicated thread, so both parties may send before receiving without
//! deadlocking on full socket buffers.

use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use thiserror::Error;

use crate::shares::Role;

/// Largest payload accepted on either side.
pub const MAX_PAYLOAD: usize = 1 << 30;
pub const FRAME_HEADER_LEN: usize = 5;
pub const PROTOCOL_VERSION: u16 = 1;
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const HELLO_MAGIC: &[u8; 4] = b"BFHS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    Handshake = 0x01,
    ShareBatch = 0x02,
    BeaverEf = 0x03,
    BitBatch = 0x04,
    Reconstruct = 0x05,
    Certificate = 0x06,
    Abort = 0x07,
}

impl TryFrom<u8> for Tag {
    type Error = TransportError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Ok(match v {
            0x01 => Tag::Handshake,
            0x02 => Tag::ShareBatch,
            0x03 => Tag::BeaverEf,
            0x04 => Tag::BitBatch,
            0x05 => Tag::Reconstruct,
            0x06 => Tag::Certificate,
            0x07 => Tag::Abort,
            other => return Err(TransportError::UnknownTag(other)),
        })
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("channel closed by peer")]
    ChannelClosed,
    #[error("frame payload of {0} bytes exceeds the 2^30 byte limit")]
    FrameTooLarge(usize),
    #[error("unknown frame tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("expected {expected:?} frame, got {got:?}")]
    UnexpectedTag { expected: Tag, got: Tag },
    #[error("peer aborted: {0}")]
    Aborted(String),
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("handshake timed out")]
    HandshakeTimeout,
    #[error("protocol version mismatch: local {local}, peer {peer}")]
    VersionMismatch { local: u16, peer: u16 },
    #[error("malformed handshake")]
    BadHandshake,
    #[error("both endpoints claim role {0}")]
    RoleConflict(Role),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// One tagged message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(tag: Tag, payload: Vec<u8>) -> Self {
        Self { tag, payload }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, TransportError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(TransportError::FrameTooLarge(self.payload.len()));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.push(self.tag as u8);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Parses one frame from the front of `bytes`; returns it and the number
    /// of bytes consumed, or `None` if more input is needed.
    pub fn decode(bytes: &[u8]) -> Result<Option<(Frame, usize)>, TransportError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Ok(None);
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(TransportError::FrameTooLarge(len));
        }
        let tag = Tag::try_from(bytes[4])?;
        if bytes.len() < FRAME_HEADER_LEN + len {
            return Ok(None);
        }
        let payload = bytes[FRAME_HEADER_LEN..FRAME_HEADER_LEN + len].to_vec();
        Ok(Some((Frame { tag, payload }, FRAME_HEADER_LEN + len)))
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Frame, TransportError> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        r.read_exact(&mut header).map_err(closed_on_eof)?;
        let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(TransportError::FrameTooLarge(len));
        }
        let tag = Tag::try_from(header[4])?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload).map_err(closed_on_eof)?;
        Ok(Frame { tag, payload })
    }
}

fn closed_on_eof(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => TransportError::ChannelClosed,
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::HandshakeTimeout,
        _ => TransportError::Io(e),
    }
}

/// Traffic counters of one endpoint. A round is counted each time the
/// endpoint receives after having sent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub frames_received: u64,
    pub bytes_received: u64,
    pub rounds: u64,
}

impl ChannelStats {
    /// Counter increase from `earlier` to `self`.
    pub fn since(&self, earlier: &ChannelStats) -> ChannelStats {
        ChannelStats {
            frames_sent: self.frames_sent - earlier.frames_sent,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            frames_received: self.frames_received - earlier.frames_received,
            bytes_received: self.bytes_received - earlier.bytes_received,
            rounds: self.rounds - earlier.rounds,
        }
    }
}

impl fmt::Display for ChannelStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rounds={} frames_sent={} bytes_sent={} frames_received={} bytes_received={}",
            self.rounds, self.frames_sent, self.bytes_sent, self.frames_received, self.bytes_received
        )
    }
}

#[derive(Debug, Default)]
struct StatsCounter {
    stats: ChannelStats,
    sent_since_recv: bool,
}

impl StatsCounter {
    fn on_send(&mut self, frame_len: usize) {
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += frame_len as u64;
        self.sent_since_recv = true;
    }

    fn on_recv(&mut self, frame_len: usize) {
        if self.sent_since_recv {
            self.stats.rounds += 1;
            self.sent_since_recv = false;
        }
        self.stats.frames_received += 1;
        self.stats.bytes_received += frame_len as u64;
    }
}

/// A reliable, ordered, duplex frame channel.
pub trait Channel: Send {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Frame, TransportError>;
    fn stats(&self) -> ChannelStats;

    /// Receives a frame of the given kind. An abort frame from the peer is
    /// surfaced as [`TransportError::Aborted`].
    fn recv_expect(&mut self, tag: Tag) -> Result<Vec<u8>, TransportError> {
        let frame = self.recv()?;
        if frame.tag == tag {
            Ok(frame.payload)
        } else if frame.tag == Tag::Abort {
            Err(TransportError::Aborted(
                String::from_utf8_lossy(&frame.payload).into_owned(),
            ))
        } else {
            Err(TransportError::UnexpectedTag {
                expected: tag,
                got: frame.tag,
            })
        }
    }

    /// Sends `payload` and receives the peer's frame of the same kind.
    fn exchange(&mut self, tag: Tag, payload: Vec<u8>) -> Result<Vec<u8>, TransportError> {
        self.send(Frame::new(tag, payload))?;
        self.recv_expect(tag)
    }

    /// Best-effort notification that this side is giving up.
    fn abort(&mut self, reason: &str) {
        let _ = self.send(Frame::new(Tag::Abort, reason.as_bytes().to_vec()));
    }
}

/// In-process endpoint.
pub struct MemChannel {
    tx: Sender<Frame>,
    rx: Receiver<Frame>,
    counter: StatsCounter,
}

/// Two connected in-process endpoints.
pub fn mem_pair() -> (MemChannel, MemChannel) {
    let (tx_a, rx_b) = unbounded();
    let (tx_b, rx_a) = unbounded();
    (
        MemChannel {
            tx: tx_a,
            rx: rx_a,
            counter: StatsCounter::default(),
        },
        MemChannel {
            tx: tx_b,
            rx: rx_b,
            counter: StatsCounter::default(),
        },
    )
}

impl Channel for MemChannel {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        if frame.payload.len() > MAX_PAYLOAD {
            return Err(TransportError::FrameTooLarge(frame.payload.len()));
        }
        let len = frame.encoded_len();
        self.tx.send(frame).map_err(|_| TransportError::ChannelClosed)?;
        self.counter.on_send(len);
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let frame = self.rx.recv().map_err(|_| TransportError::ChannelClosed)?;
        self.counter.on_recv(frame.encoded_len());
        Ok(frame)
    }

    fn stats(&self) -> ChannelStats {
        self.counter.stats
    }
}

/// TCP endpoint. Outgoing frames are queued to a writer thread.
pub struct TcpChannel {
    reader: BufReader<TcpStream>,
    writer_tx: Option<Sender<Vec<u8>>>,
    writer: Option<JoinHandle<()>>,
    writer_error: Arc<Mutex<Option<io::Error>>>,
    peer: SocketAddr,
    counter: StatsCounter,
}

impl TcpChannel {
    fn from_stream(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        let write_half = stream.try_clone()?;
        let (tx, rx) = unbounded::<Vec<u8>>();
        let writer_error = Arc::new(Mutex::new(None));
        let err_slot = writer_error.clone();
        let writer = std::thread::spawn(move || {
            let mut w = BufWriter::new(write_half);
            while let Ok(bytes) = rx.recv() {
                let mut result = w.write_all(&bytes);
                if result.is_ok() && rx.is_empty() {
                    result = w.flush();
                }
                if let Err(e) = result {
                    *err_slot.lock().unwrap() = Some(e);
                    return;
                }
            }
            let _ = w.flush();
        });
        Ok(Self {
            reader: BufReader::new(stream),
            writer_tx: Some(tx),
            writer: Some(writer),
            writer_error,
            peer,
            counter: StatsCounter::default(),
        })
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer
    }

    /// Exchanges hello frames (magic, version, role) and checks the peer.
    fn hello(&mut self, role: Role, version: u16, timeout: Duration) -> Result<(), TransportError> {
        let mut payload = HELLO_MAGIC.to_vec();
        payload.extend_from_slice(&version.to_le_bytes());
        payload.push(role.index());
        self.send(Frame::new(Tag::Handshake, payload))?;

        let stream = self.reader.get_ref();
        stream.set_read_timeout(Some(timeout))?;
        let reply = self.recv();
        self.reader.get_ref().set_read_timeout(None)?;
        let reply = reply?;
        if reply.tag != Tag::Handshake || reply.payload.len() != 7 || &reply.payload[..4] != HELLO_MAGIC {
            return Err(TransportError::BadHandshake);
        }
        let peer_version = u16::from_le_bytes([reply.payload[4], reply.payload[5]]);
        if peer_version != version {
            return Err(TransportError::VersionMismatch {
                local: version,
                peer: peer_version,
            });
        }
        let peer_role = Role::from_index(reply.payload[6]).ok_or(TransportError::BadHandshake)?;
        if peer_role == role {
            return Err(TransportError::RoleConflict(role));
        }
        // protocol traffic is accounted from here on
        self.counter = StatsCounter::default();
        Ok(())
    }

    fn check_writer(&self) -> Result<(), TransportError> {
        match self.writer_error.lock().unwrap().take() {
            Some(e) => Err(closed_on_eof(e)),
            None => Ok(()),
        }
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        self.check_writer()?;
        let bytes = frame.encode()?;
        let len = bytes.len();
        self.writer_tx
            .as_ref()
            .ok_or(TransportError::ChannelClosed)?
            .send(bytes)
            .map_err(|_| TransportError::ChannelClosed)?;
        self.counter.on_send(len);
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let frame = Frame::read_from(&mut self.reader)?;
        self.counter.on_recv(frame.encoded_len());
        Ok(frame)
    }

    fn stats(&self) -> ChannelStats {
        self.counter.stats
    }
}

impl Drop for TcpChannel {
    fn drop(&mut self) {
        // closing the queue lets the writer drain and exit
        self.writer_tx.take();
        if let Some(handle) = self.writer.take() {
            let _ = handle.join();
        }
        let _ = self.reader.get_ref().shutdown(std::net::Shutdown::Both);
    }
}

/// Connects to a listening peer and performs the hello exchange.
pub fn connect_tcp(addr: &str, role: Role) -> Result<TcpChannel, TransportError> {
    connect_tcp_with(addr, role, PROTOCOL_VERSION, Duration::ZERO, DEFAULT_HANDSHAKE_TIMEOUT)
}

/// Like [`connect_tcp`], retrying refused connections for up to `wait`.
pub fn connect_tcp_retry(addr: &str, role: Role, wait: Duration) -> Result<TcpChannel, TransportError> {
    connect_tcp_with(addr, role, PROTOCOL_VERSION, wait, DEFAULT_HANDSHAKE_TIMEOUT)
}

fn connect_tcp_with(
    addr: &str,
    role: Role,
    version: u16,
    wait: Duration,
    timeout: Duration,
) -> Result<TcpChannel, TransportError> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let deadline = Instant::now() + wait;
    let stream = loop {
        match TcpStream::connect(&addrs[..]) {
            Ok(s) => break s,
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {
                if Instant::now() >= deadline {
                    return Err(TransportError::ConnectionRefused(addr.to_string()));
                }
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(e.into()),
        }
    };
    let mut ch = TcpChannel::from_stream(stream)?;
    ch.hello(role, version, timeout)?;
    Ok(ch)
}

/// A bound listening socket awaiting the peer.
pub struct PartyListener {
    listener: TcpListener,
}

impl PartyListener {
    pub fn bind(addr: &str) -> Result<Self, TransportError> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }

    pub fn accept(&self, role: Role) -> Result<TcpChannel, TransportError> {
        self.accept_with(role, PROTOCOL_VERSION, DEFAULT_HANDSHAKE_TIMEOUT)
    }

    fn accept_with(&self, role: Role, version: u16, timeout: Duration) -> Result<TcpChannel, TransportError> {
        let (stream, _) = self.listener.accept()?;
        let mut ch = TcpChannel::from_stream(stream)?;
        ch.hello(role, version, timeout)?;
        Ok(ch)
    }
}

/// Binds `addr`, accepts one peer and performs the hello exchange.
pub fn accept_tcp(addr: &str, role: Role) -> Result<TcpChannel, TransportError> {
    PartyListener::bind(addr)?.accept(role)
}
