//! Byte-level framing, session handshake and carrier identifiers.
//!
//! Every frame starts with a fixed 25-byte big-endian header:
//!
//! ```text
//!  0      2     3     4      5             13            21        25
//!  +------+-----+-----+------+-------------+-------------+---------+----------
//!  | 5950 | ver | typ | flag | message_id  | timestamp   | pay_len | payload..
//!  +------+-----+-----+------+-------------+-------------+---------+----------
//! ```
//!
//! Stream carriers concatenate frames back to back; the datagram carrier sends
//! exactly one frame per datagram.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use bytes::Bytes;
use thiserror::Error;

use crate::nameserver::PortName;

pub const MAGIC: [u8; 2] = [0x59, 0x50];
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 25;

/// Frame flag: the receiver should answer with an ACK frame.
pub const FLAG_ACK_REQUESTED: u8 = 0x01;

/// Protocol version exchanged in the handshake payload.
pub const PROTOCOL_VERSION: u32 = 1;

/// Largest payload a single udp datagram may carry.
pub const UDP_MAX_PAYLOAD: usize = 60 * 1024;

/// Upper bound on payloads accepted by [`read_frame`]; protects stream readers
/// from allocating whatever a corrupt length field declares.
pub const STREAM_MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum FrameType {
    Data = 0,
    Ack = 1,
    AdminRequest = 2,
    AdminReply = 3,
    Handshake = 4,
}

impl FrameType {
    pub const ALL: [FrameType; 5] = [
        FrameType::Data,
        FrameType::Ack,
        FrameType::AdminRequest,
        FrameType::AdminReply,
        FrameType::Handshake,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub message_id: u64,
    pub timestamp_ns: u64,
    pub flags: u8,
    pub payload: Bytes,
}

impl Frame {
    pub fn new(
        frame_type: FrameType,
        message_id: u64,
        timestamp_ns: u64,
        payload: impl Into<Bytes>,
    ) -> Self {
        Frame {
            frame_type,
            message_id,
            timestamp_ns,
            flags: 0,
            payload: payload.into(),
        }
    }

    pub fn with_flags(mut self, flags: u8) -> Self {
        self.flags = flags;
        self
    }

    pub fn ack_requested(&self) -> bool {
        self.flags & FLAG_ACK_REQUESTED != 0
    }

    /// The ACK answering this frame: same id and timestamp, empty payload.
    pub fn ack(&self) -> Frame {
        Frame::new(
            FrameType::Ack,
            self.message_id,
            self.timestamp_ns,
            Bytes::new(),
        )
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("payload-too-large: {0} bytes")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad-magic")]
    BadMagic,
    #[error("unknown-version {0}")]
    UnknownVersion(u8),
    #[error("unknown-type {0}")]
    UnknownType(u8),
    /// More input is needed; `needed` is the total length the frame requires.
    #[error("truncated: need {needed} bytes")]
    Truncated { needed: usize },
    /// A datagram held bytes past the end of its frame.
    #[error("trailing bytes after frame: {0}")]
    TrailingBytes(usize),
}

impl DecodeError {
    pub fn is_truncated(&self) -> bool {
        matches!(self, DecodeError::Truncated { .. })
    }
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(f.encoded_len());
    encode_frame_into(f, &mut out)?;
    Ok(out)
}

pub fn encode_frame_into(f: &Frame, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let len = u32::try_from(f.payload.len())
        .map_err(|_| EncodeError::PayloadTooLarge(f.payload.len()))?;
    out.extend_from_slice(&MAGIC);
    out.push(WIRE_VERSION);
    out.push(f.frame_type as u8);
    out.push(f.flags);
    out.extend_from_slice(&f.message_id.to_be_bytes());
    out.extend_from_slice(&f.timestamp_ns.to_be_bytes());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&f.payload);
    Ok(())
}

/// Header fields, validated, without the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub frame_type: FrameType,
    pub flags: u8,
    pub message_id: u64,
    pub timestamp_ns: u64,
    pub payload_len: u32,
}

/// Validates as much of the header as `bytes` holds. Errors are reported as
/// soon as the offending byte is present, so a bad magic is never mistaken for
/// a short read.
pub fn decode_header(bytes: &[u8]) -> Result<FrameHeader, DecodeError> {
    for (i, m) in MAGIC.iter().enumerate() {
        match bytes.get(i) {
            Some(b) if b != m => return Err(DecodeError::BadMagic),
            None => return Err(DecodeError::Truncated { needed: HEADER_LEN }),
            _ => {}
        }
    }
    match bytes.get(2) {
        Some(&v) if v != WIRE_VERSION => return Err(DecodeError::UnknownVersion(v)),
        None => return Err(DecodeError::Truncated { needed: HEADER_LEN }),
        _ => {}
    }
    let frame_type = match bytes.get(3) {
        Some(&t) => FrameType::from_byte(t).ok_or(DecodeError::UnknownType(t))?,
        None => return Err(DecodeError::Truncated { needed: HEADER_LEN }),
    };
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated { needed: HEADER_LEN });
    }
    let u64_at = |at: usize| u64::from_be_bytes(bytes[at..at + 8].try_into().unwrap());
    Ok(FrameHeader {
        frame_type,
        flags: bytes[4],
        message_id: u64_at(5),
        timestamp_ns: u64_at(13),
        payload_len: u32::from_be_bytes(bytes[21..25].try_into().unwrap()),
    })
}

/// Decodes the frame at the start of `bytes`, returning it with the number of
/// bytes consumed. Trailing bytes beyond the declared payload are left alone.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), DecodeError> {
    let h = decode_header(bytes)?;
    let total = HEADER_LEN + h.payload_len as usize;
    if bytes.len() < total {
        return Err(DecodeError::Truncated { needed: total });
    }
    let frame = Frame {
        frame_type: h.frame_type,
        message_id: h.message_id,
        timestamp_ns: h.timestamp_ns,
        flags: h.flags,
        payload: Bytes::copy_from_slice(&bytes[HEADER_LEN..total]),
    };
    Ok((frame, total))
}

/// Decodes a datagram, which must contain exactly one frame.
pub fn decode_datagram(bytes: &[u8]) -> Result<Frame, DecodeError> {
    let (frame, used) = decode_frame(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - used));
    }
    Ok(frame)
}

fn invalid(e: impl fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

/// Reads one frame from a stream carrier.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> io::Result<Frame> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let h = decode_header(&header).map_err(invalid)?;
    let len = h.payload_len as usize;
    if len > STREAM_MAX_PAYLOAD {
        return Err(invalid(format!(
            "frame payload of {len} bytes exceeds stream limit"
        )));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Frame {
        frame_type: h.frame_type,
        message_id: h.message_id,
        timestamp_ns: h.timestamp_ns,
        flags: h.flags,
        payload: payload.into(),
    })
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, f: &Frame) -> io::Result<()> {
    let buf = encode_frame(f).map_err(invalid)?;
    w.write_all(&buf)?;
    w.flush()
}

// --- carriers ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CarrierId {
    /// Reliable, ordered byte stream.
    Tcp,
    /// Unreliable datagrams, one frame per datagram.
    Udp,
    /// Frames routed through an in-process emulated network.
    Emu,
}

impl CarrierId {
    pub const ALL: [CarrierId; 3] = [CarrierId::Tcp, CarrierId::Udp, CarrierId::Emu];

    pub fn as_str(self) -> &'static str {
        match self {
            CarrierId::Tcp => "tcp",
            CarrierId::Udp => "udp",
            CarrierId::Emu => "emu",
        }
    }

    pub fn is_reliable(self) -> bool {
        matches!(self, CarrierId::Tcp)
    }
}

impl fmt::Display for CarrierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("carrier-unsupported: {0}")]
pub struct UnknownCarrier(pub String);

impl FromStr for CarrierId {
    type Err = UnknownCarrier;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(CarrierId::Tcp),
            "udp" => Ok(CarrierId::Udp),
            "emu" => Ok(CarrierId::Emu),
            other => Err(UnknownCarrier(other.to_string())),
        }
    }
}

// --- handshake ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionRole {
    /// Carries DATA and ACK frames.
    Data,
    /// Carries ADMIN_REQUEST and ADMIN_REPLY frames.
    Admin,
}

impl SessionRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionRole::Data => "data",
            SessionRole::Admin => "admin",
        }
    }

    /// Whether a frame of type `t` may appear on a session with this role
    /// once the handshake is complete.
    pub fn permits(self, t: FrameType) -> bool {
        match self {
            SessionRole::Data => matches!(t, FrameType::Data | FrameType::Ack),
            SessionRole::Admin => matches!(t, FrameType::AdminRequest | FrameType::AdminReply),
        }
    }
}

impl FromStr for SessionRole {
    type Err = HandshakeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "data" => Ok(SessionRole::Data),
            "admin" => Ok(SessionRole::Admin),
            other => Err(HandshakeError::Malformed(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeInfo {
    pub protocol_version: u32,
    pub session_role: SessionRole,
    pub source_port_name: PortName,
    pub requested_carrier: CarrierId,
    /// Carrier-specific parameters (e.g. the emulated host a channel lives on).
    pub params: BTreeMap<String, String>,
}

impl HandshakeInfo {
    pub fn new(role: SessionRole, source: PortName, carrier: CarrierId) -> Self {
        HandshakeInfo {
            protocol_version: PROTOCOL_VERSION,
            session_role: role,
            source_port_name: source,
            requested_carrier: carrier,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    fn to_payload(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("version".to_string(), self.protocol_version.to_string());
        kv.insert("role".to_string(), self.session_role.as_str().to_string());
        kv.insert("source".to_string(), self.source_port_name.to_string());
        kv.insert("carrier".to_string(), self.requested_carrier.to_string());
        for (k, v) in &self.params {
            kv.insert(format!("x-{k}"), v.clone());
        }
        render_kv(&kv)
    }

    fn from_payload(text: &str) -> Result<Self, HandshakeError> {
        let kv = parse_kv(text)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| HandshakeError::Malformed(format!("missing {k}")))
        };
        let protocol_version = get("version")?
            .parse()
            .map_err(|_| HandshakeError::Malformed("bad version".into()))?;
        let session_role = get("role")?.parse()?;
        let source_port_name = get("source")?
            .parse()
            .map_err(|e| HandshakeError::Malformed(format!("{e}")))?;
        let requested_carrier = get("carrier")?
            .parse()
            .map_err(|e: UnknownCarrier| HandshakeError::Malformed(e.to_string()))?;
        let params = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("x-").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(HandshakeInfo {
            protocol_version,
            session_role,
            source_port_name,
            requested_carrier,
            params,
        })
    }
}

/// Result of a successful handshake, as seen from either side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub role: SessionRole,
    pub carrier: CarrierId,
    /// Name announced by the initiator.
    pub initiator: PortName,
    /// Parameters the remote side attached to its handshake frame.
    pub remote_params: BTreeMap<String, String>,
}

/// Why an acceptor turned a handshake down.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    VersionMismatch,
    RoleRejected,
    CarrierUnsupported,
    Other(String),
}

impl Rejection {
    fn reason(&self) -> &str {
        match self {
            Rejection::VersionMismatch => "version-mismatch",
            Rejection::RoleRejected => "role-rejected",
            Rejection::CarrierUnsupported => "carrier-unsupported",
            Rejection::Other(s) => s,
        }
    }
}

#[derive(Debug, Error)]
pub enum HandshakeError {
    #[error("version-mismatch (local {local}, remote {remote})")]
    VersionMismatch { local: u32, remote: u32 },
    #[error("role-rejected")]
    RoleRejected,
    #[error("carrier-unsupported")]
    CarrierUnsupported,
    #[error("handshake rejected: {0}")]
    Rejected(String),
    #[error("timeout")]
    Timeout,
    #[error("malformed handshake: {0}")]
    Malformed(String),
    #[error("handshake i/o: {0}")]
    Io(io::Error),
}

impl From<io::Error> for HandshakeError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => HandshakeError::Timeout,
            _ => HandshakeError::Io(e),
        }
    }
}

fn render_kv(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, HandshakeError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| HandshakeError::Malformed(format!("line without '=': {l:?}")))
        })
        .collect()
}

fn read_handshake_frame<S: Read + ?Sized>(
    stream: &mut S,
) -> Result<BTreeMap<String, String>, HandshakeError> {
    let frame = read_frame(stream)?;
    if frame.frame_type != FrameType::Handshake {
        return Err(HandshakeError::Malformed(format!(
            "expected HANDSHAKE, got {:?}",
            frame.frame_type
        )));
    }
    let text = std::str::from_utf8(&frame.payload)
        .map_err(|_| HandshakeError::Malformed("payload is not utf-8".into()))?;
    parse_kv(text)
}

fn write_handshake_frame<S: Write + ?Sized>(stream: &mut S, text: String) -> io::Result<()> {
    write_frame(
        stream,
        &Frame::new(FrameType::Handshake, 0, 0, text.into_bytes()),
    )
}

/// Initiator side: sends `info` and waits for the acceptor's verdict.
pub fn initiate_handshake<S: Read + Write + ?Sized>(
    stream: &mut S,
    info: &HandshakeInfo,
) -> Result<Session, HandshakeError> {
    write_handshake_frame(stream, info.to_payload())?;
    let reply = read_handshake_frame(stream)?;
    match reply.get("status").map(String::as_str) {
        Some("ok") => {}
        Some("rejected") => {
            let reason = reply.get("reason").cloned().unwrap_or_default();
            return Err(match reason.as_str() {
                "version-mismatch" => HandshakeError::VersionMismatch {
                    local: info.protocol_version,
                    remote: reply
                        .get("version")
                        .and_then(|v| v.parse().ok())
                        .unwrap_or(0),
                },
                "role-rejected" => HandshakeError::RoleRejected,
                "carrier-unsupported" => HandshakeError::CarrierUnsupported,
                _ => HandshakeError::Rejected(reason),
            });
        }
        _ => return Err(HandshakeError::Malformed("reply without status".into())),
    }
    let remote_params = reply
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("x-").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Session {
        role: info.session_role,
        carrier: info.requested_carrier,
        initiator: info.source_port_name.clone(),
        remote_params,
    })
}

/// Acceptor side. `negotiate` sees the validated request and either returns
/// the parameters to send back or a rejection. Version checking happens before
/// `negotiate` is consulted. On rejection the reply is still written so the
/// initiator learns the reason; the caller should then drop the connection.
pub fn accept_handshake<S, F>(
    stream: &mut S,
    negotiate: F,
) -> Result<(Session, HandshakeInfo), HandshakeError>
where
    S: Read + Write + ?Sized,
    F: FnOnce(&HandshakeInfo) -> Result<BTreeMap<String, String>, Rejection>,
{
    let kv = read_handshake_frame(stream)?;
    let info = HandshakeInfo::from_payload(&render_kv(&kv))?;
    let verdict = if info.protocol_version != PROTOCOL_VERSION {
        Err(Rejection::VersionMismatch)
    } else {
        negotiate(&info)
    };
    let mut reply = BTreeMap::new();
    reply.insert("version".to_string(), PROTOCOL_VERSION.to_string());
    match verdict {
        Ok(params) => {
            reply.insert("status".to_string(), "ok".to_string());
            for (k, v) in params {
                reply.insert(format!("x-{k}"), v);
            }
            write_handshake_frame(stream, render_kv(&reply))?;
            Ok((
                Session {
                    role: info.session_role,
                    carrier: info.requested_carrier,
                    initiator: info.source_port_name.clone(),
                    remote_params: info.params.clone(),
                },
                info,
            ))
        }
        Err(rejection) => {
            reply.insert("status".to_string(), "rejected".to_string());
            reply.insert("reason".to_string(), rejection.reason().to_string());
            // Best effort: the initiator may already be gone.
            let _ = write_handshake_frame(stream, render_kv(&reply));
            Err(match rejection {
                Rejection::VersionMismatch => HandshakeError::VersionMismatch {
                    local: PROTOCOL_VERSION,
                    remote: info.protocol_version,
                },
                Rejection::RoleRejected => HandshakeError::RoleRejected,
                Rejection::CarrierUnsupported => HandshakeError::CarrierUnsupported,
                Rejection::Other(r) => HandshakeError::Rejected(r),
            })
        }
    }
}
