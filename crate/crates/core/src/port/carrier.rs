//! Per-channel transports over the three carriers.
//!
//! tcp channels carry frames and acknowledgments on the handshake stream.
//! udp and emu channels keep the handshake stream open as a control link:
//! closing it is the disconnect signal.

use std::io::{self, ErrorKind, Read};
use std::net::{Shutdown, TcpStream, UdpSocket};
use std::sync::Mutex;
use std::time::Duration;

use bytes::Bytes;
use socket2::SockRef;

use crate::netemu::{EmuFlowHandle, EmuReceiver, EmuRecvError, EmuSendError};
use crate::wire::{
    decode_datagram, encode_frame, read_frame, write_frame, CarrierId, Frame, UDP_MAX_PAYLOAD,
};

/// Poll interval of threads that wait on datagram or emulated carriers.
pub(crate) const POLL: Duration = Duration::from_millis(20);

#[derive(Debug)]
pub(crate) enum RecvOutcome {
    Frame(Frame),
    /// Nothing arrived within the poll interval.
    Idle,
    /// The peer closed the channel.
    Closed,
}

fn set_tos_on(sock: SockRef<'_>, tos: u8) -> Result<(), String> {
    sock.set_tos_v4(tos as u32).map_err(|e| match e.kind() {
        ErrorKind::PermissionDenied => "permission".to_string(),
        _ => format!("tos-unsupported: {e}"),
    })
}

/// Reports whether the control stream was closed by the peer, without blocking.
fn control_closed(control: &TcpStream) -> bool {
    let mut b = [0u8; 1];
    match control.peek(&mut b) {
        Ok(0) => true,
        Ok(_) => false,
        Err(e) if e.kind() == ErrorKind::WouldBlock => false,
        Err(_) => true,
    }
}

/// Reads the control stream until the peer closes it, discarding bytes.
fn drain_until_closed(control: &TcpStream, timeout: Duration) {
    let _ = control.set_nonblocking(false);
    let _ = control.set_read_timeout(Some(timeout));
    let mut buf = [0u8; 64];
    let mut c = control;
    while let Ok(n) = c.read(&mut buf) {
        if n == 0 {
            break;
        }
    }
}

fn recv_datagram(socket: &UdpSocket) -> RecvOutcome {
    let mut buf = vec![0u8; UDP_MAX_PAYLOAD + 64];
    match socket.recv(&mut buf) {
        Ok(n) => match decode_datagram(&buf[..n]) {
            Ok(f) => RecvOutcome::Frame(f),
            Err(e) => {
                log::debug!("discarding malformed datagram: {e}");
                RecvOutcome::Idle
            }
        },
        Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
            RecvOutcome::Idle
        }
        // A connected udp socket reports ICMP unreachable as an error; the
        // control stream decides when the channel is really gone.
        Err(e) if e.kind() == ErrorKind::ConnectionRefused => RecvOutcome::Idle,
        Err(_) => RecvOutcome::Closed,
    }
}

fn recv_emu(rx: &EmuReceiver) -> RecvOutcome {
    match rx.recv_timeout(POLL) {
        Ok(bytes) => match decode_datagram(&bytes) {
            Ok(f) => RecvOutcome::Frame(f),
            Err(_) => RecvOutcome::Idle,
        },
        Err(EmuRecvError::Timeout) => RecvOutcome::Idle,
        Err(EmuRecvError::Closed) => RecvOutcome::Closed,
    }
}

/// Outbound half of a channel, shared by the sender thread and the admin path.
#[derive(Debug)]
pub(crate) enum OutTransport {
    Tcp {
        stream: TcpStream,
    },
    Udp {
        socket: UdpSocket,
        control: TcpStream,
    },
    Emu {
        flow: EmuFlowHandle,
        control: TcpStream,
    },
}

/// Receiving half used by the output channel's acknowledgment reader.
#[derive(Debug)]
pub(crate) enum AckSource {
    Tcp(TcpStream),
    Udp {
        socket: UdpSocket,
        control: TcpStream,
    },
    Emu {
        rx: EmuReceiver,
        control: TcpStream,
    },
}

impl OutTransport {
    pub fn carrier(&self) -> CarrierId {
        match self {
            OutTransport::Tcp { .. } => CarrierId::Tcp,
            OutTransport::Udp { .. } => CarrierId::Udp,
            OutTransport::Emu { .. } => CarrierId::Emu,
        }
    }

    /// Largest payload the carrier accepts in one frame.
    pub fn max_payload(&self) -> usize {
        match self {
            OutTransport::Udp { .. } => UDP_MAX_PAYLOAD,
            _ => u32::MAX as usize,
        }
    }

    pub fn wait_ready(&self, timeout: Duration) -> bool {
        match self {
            OutTransport::Emu { flow, .. } => flow.wait_ready(timeout),
            _ => true,
        }
    }

    pub fn send(&self, frame: &Frame) -> io::Result<()> {
        match self {
            OutTransport::Tcp { stream } => write_frame(&mut &*stream, frame),
            OutTransport::Udp { socket, .. } => {
                let buf =
                    encode_frame(frame).map_err(|e| io::Error::new(ErrorKind::InvalidInput, e))?;
                socket.send(&buf).map(|_| ())
            }
            OutTransport::Emu { flow, .. } => {
                let buf =
                    encode_frame(frame).map_err(|e| io::Error::new(ErrorKind::InvalidInput, e))?;
                let bytes = Bytes::from(buf);
                loop {
                    match flow.send(bytes.clone()) {
                        Ok(()) => return Ok(()),
                        Err(EmuSendError::Closed) => return Err(ErrorKind::BrokenPipe.into()),
                        Err(EmuSendError::Blocked) => {
                            if !flow.wait_ready(Duration::from_secs(3600)) {
                                return Err(ErrorKind::BrokenPipe.into());
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn set_tos(&self, tos: u8) -> Result<(), String> {
        match self {
            OutTransport::Tcp { stream } => set_tos_on(SockRef::from(stream), tos),
            OutTransport::Udp { socket, .. } => set_tos_on(SockRef::from(socket), tos),
            OutTransport::Emu { flow, .. } => {
                flow.set_tos(tos);
                Ok(())
            }
        }
    }

    /// Emulated NIC admission order for the channel thread.
    pub fn set_thread_rank(&self, rank: i32) {
        if let OutTransport::Emu { flow, .. } = self {
            flow.set_thread_rank(rank);
        }
    }

    /// Orderly close: signals the peer and waits (bounded) for it to let go.
    pub fn close(&self, linger: Duration) {
        match self {
            OutTransport::Tcp { stream } => {
                let _ = stream.shutdown(Shutdown::Write);
            }
            OutTransport::Udp { control, .. } | OutTransport::Emu { control, .. } => {
                let _ = control.shutdown(Shutdown::Write);
                drain_until_closed(control, linger);
                let _ = control.shutdown(Shutdown::Both);
            }
        }
        if let OutTransport::Emu { flow, .. } = self {
            flow.network().close_flow(flow.flow());
        }
    }

    pub fn abort(&self) {
        match self {
            OutTransport::Tcp { stream } => {
                let _ = stream.shutdown(Shutdown::Both);
            }
            OutTransport::Udp { control, .. } => {
                let _ = control.shutdown(Shutdown::Both);
            }
            OutTransport::Emu { flow, control } => {
                let _ = control.shutdown(Shutdown::Both);
                flow.network().close_flow(flow.flow());
            }
        }
    }
}

impl AckSource {
    pub fn recv(&self) -> RecvOutcome {
        match self {
            AckSource::Tcp(stream) => match read_frame(&mut &*stream) {
                Ok(f) => RecvOutcome::Frame(f),
                Err(_) => RecvOutcome::Closed,
            },
            AckSource::Udp { socket, control } => match recv_datagram(socket) {
                RecvOutcome::Idle if control_closed(control) => RecvOutcome::Closed,
                other => other,
            },
            AckSource::Emu { rx, control } => match recv_emu(rx) {
                RecvOutcome::Idle if control_closed(control) => RecvOutcome::Closed,
                other => other,
            },
        }
    }
}

/// Inbound half of a channel, owned by the receiver thread. Acknowledgments
/// go back through `reply`.
#[derive(Debug)]
pub(crate) enum InTransport {
    Tcp {
        stream: TcpStream,
        reply: Mutex<TcpStream>,
    },
    Udp {
        socket: UdpSocket,
        control: TcpStream,
    },
    Emu {
        rx: EmuReceiver,
        reply: EmuFlowHandle,
        control: TcpStream,
    },
}

impl InTransport {
    pub fn recv(&self) -> RecvOutcome {
        match self {
            InTransport::Tcp { stream, .. } => match read_frame(&mut &*stream) {
                Ok(f) => RecvOutcome::Frame(f),
                Err(_) => RecvOutcome::Closed,
            },
            InTransport::Udp { socket, control } => match recv_datagram(socket) {
                RecvOutcome::Idle if control_closed(control) => RecvOutcome::Closed,
                other => other,
            },
            InTransport::Emu { rx, control, .. } => match recv_emu(rx) {
                RecvOutcome::Idle if control_closed(control) => RecvOutcome::Closed,
                other => other,
            },
        }
    }

    pub fn send_ack(&self, ack: &Frame) -> io::Result<()> {
        match self {
            InTransport::Tcp { reply, .. } => {
                let s = reply.lock().unwrap_or_else(|e| e.into_inner());
                write_frame(&mut &*s, ack)
            }
            InTransport::Udp { socket, .. } => {
                let buf =
                    encode_frame(ack).map_err(|e| io::Error::new(ErrorKind::InvalidInput, e))?;
                socket.send(&buf).map(|_| ())
            }
            InTransport::Emu { reply, .. } => {
                let buf =
                    encode_frame(ack).map_err(|e| io::Error::new(ErrorKind::InvalidInput, e))?;
                reply
                    .send(Bytes::from(buf))
                    .map_err(|_| ErrorKind::BrokenPipe.into())
            }
        }
    }

    /// Marks acknowledgments sent back to the publisher.
    pub fn set_tos(&self, tos: u8) -> Result<(), String> {
        match self {
            InTransport::Tcp { stream, .. } => set_tos_on(SockRef::from(stream), tos),
            InTransport::Udp { socket, .. } => set_tos_on(SockRef::from(socket), tos),
            InTransport::Emu { reply, .. } => {
                reply.set_tos(tos);
                Ok(())
            }
        }
    }

    pub fn set_thread_rank(&self, rank: i32) {
        if let InTransport::Emu { reply, .. } = self {
            reply.set_thread_rank(rank);
        }
    }

    /// Unblocks the receiver thread and tells the peer the channel is gone.
    pub fn shutdown(&self) {
        match self {
            InTransport::Tcp { stream, .. } => {
                let _ = stream.shutdown(Shutdown::Both);
            }
            InTransport::Udp { control, .. } => {
                let _ = control.shutdown(Shutdown::Both);
            }
            InTransport::Emu { reply, control, .. } => {
                let _ = control.shutdown(Shutdown::Both);
                reply.network().close_flow(reply.flow());
            }
        }
    }
}

pub(crate) fn prepare_control(control: &TcpStream) -> io::Result<()> {
    control.set_read_timeout(None)?;
    control.set_nonblocking(true)
}

pub(crate) fn prepare_udp(socket: &UdpSocket) -> io::Result<()> {
    socket.set_read_timeout(Some(POLL))
}
