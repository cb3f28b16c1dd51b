//! Ports: named endpoints holding any number of input and output channels,
//! each served by its own thread.

mod admin;
mod carrier;
mod channel;

use std::collections::BTreeMap;
use std::io;
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::os::unix::thread::JoinHandleExt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;

use crate::clock::monotonic_ns;
use crate::nameserver::{
    nameserver_addr_from_env, EndpointTriplet, NameClient, NameError, PortName,
};
use crate::netemu::{EmuNetwork, FlowSpec};
use crate::qos::{
    current_thread, OsScheduler, PriorityClass, QosError, SchedRequest, SchedulingProperties,
    ThreadHandle, ThreadScheduler,
};
use crate::wire::{
    accept_handshake, initiate_handshake, CarrierId, Frame, FrameType, HandshakeError,
    HandshakeInfo, Rejection, SessionRole, FLAG_ACK_REQUESTED,
};

pub use admin::{AdminClient, AdminError};
use carrier::{AckSource, InTransport, OutTransport, RecvOutcome, POLL};
use channel::{AckLog, ChannelQueue, Inbox, Outgoing};
pub use channel::{
    AckRecord, ChannelCounters, ChannelInfo, ChannelStatus, Direction, EnqueueOutcome, Inbound,
    Message, DEFAULT_INBOX_CAPACITY, DEFAULT_QUEUE_CAPACITY,
};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
/// How long a disconnect waits for the peer to release the channel.
const DISCONNECT_LINGER: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum PortError {
    #[error("name-already-registered")]
    NameAlreadyRegistered,
    #[error("bind-failure: {0}")]
    Bind(String),
    #[error("lookup-failure: {0}")]
    Lookup(NameError),
    #[error("handshake-failure: {0}")]
    Handshake(#[from] HandshakeError),
    #[error("carrier-unsupported: {0}")]
    CarrierUnsupported(String),
    #[error("no-such-channel")]
    NoSuchChannel,
    #[error("already-connected")]
    AlreadyConnected,
    #[error("timeout")]
    Timeout,
    #[error("port-closed")]
    Closed,
    #[error(transparent)]
    Qos(#[from] QosError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl PortError {
    /// The short token used in admin replies.
    pub fn token(&self) -> String {
        match self {
            PortError::Lookup(NameError::NotFound) => "not-found".into(),
            PortError::Lookup(e) => format!("lookup-failure {e}"),
            PortError::Handshake(e) => format!("handshake-failure {e}"),
            other => other.to_string(),
        }
    }
}

/// Attaches a port to an emulated network as one of its hosts.
#[derive(Debug, Clone)]
pub struct EmuAttachment {
    pub network: EmuNetwork,
    pub host: String,
}

#[derive(Debug, Clone)]
pub struct PortConfig {
    /// Name server to register with; `None` runs the port unregistered.
    pub nameserver: Option<SocketAddr>,
    pub listen: SocketAddr,
    pub queue_capacity: usize,
    pub inbox_capacity: usize,
    pub scheduler: Arc<dyn ThreadScheduler>,
    pub emu: Option<EmuAttachment>,
}

impl Default for PortConfig {
    fn default() -> Self {
        PortConfig {
            nameserver: nameserver_addr_from_env().ok(),
            listen: SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), 0),
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            inbox_capacity: DEFAULT_INBOX_CAPACITY,
            scheduler: Arc::new(OsScheduler),
            emu: None,
        }
    }
}

impl PortConfig {
    pub fn with_nameserver(mut self, addr: SocketAddr) -> Self {
        self.nameserver = Some(addr);
        self
    }

    pub fn unregistered(mut self) -> Self {
        self.nameserver = None;
        self
    }

    pub fn with_listen(mut self, addr: SocketAddr) -> Self {
        self.listen = addr;
        self
    }

    pub fn with_queue_capacity(mut self, n: usize) -> Self {
        self.queue_capacity = n;
        self
    }

    pub fn with_scheduler(mut self, s: Arc<dyn ThreadScheduler>) -> Self {
        self.scheduler = s;
        self
    }

    pub fn with_emu(mut self, network: EmuNetwork, host: &str) -> Self {
        self.emu = Some(EmuAttachment {
            network,
            host: host.to_string(),
        });
        self
    }
}

#[derive(Debug, Default)]
struct ChannelQos {
    sched: SchedulingProperties,
    tos: u8,
    tos_refusal: Option<String>,
}

impl ChannelQos {
    fn degraded_reasons(&self) -> Vec<String> {
        self.sched
            .degraded_reason
            .iter()
            .chain(self.tos_refusal.iter())
            .cloned()
            .collect()
    }
}

/// Completion latch for a channel's helper thread.
#[derive(Debug, Default)]
struct Latch {
    done: Mutex<bool>,
    cond: Condvar,
}

impl Latch {
    fn set(&self) {
        *self.done.lock().unwrap_or_else(|e| e.into_inner()) = true;
        self.cond.notify_all();
    }

    fn wait(&self, timeout: Duration) -> bool {
        let g = self.done.lock().unwrap_or_else(|e| e.into_inner());
        let (g, _) = self
            .cond
            .wait_timeout_while(g, timeout, |d| !*d)
            .unwrap_or_else(|e| e.into_inner());
        *g
    }
}

#[derive(Debug)]
struct OutputChannel {
    peer: PortName,
    queue: ChannelQueue,
    transport: OutTransport,
    qos: Mutex<ChannelQos>,
    acks: AckLog,
    stop: AtomicBool,
    peer_closed: AtomicBool,
    sender: Mutex<Option<JoinHandle<()>>>,
    sender_thread: Mutex<Option<ThreadHandle>>,
    ack_reader: Mutex<Option<JoinHandle<()>>>,
    ack_done: Latch,
}

impl OutputChannel {
    fn info(&self) -> ChannelInfo {
        let (queue_capacity, queued, counters) = self.queue.snapshot();
        let qos = lock(&self.qos);
        let degraded_reasons = qos.degraded_reasons();
        ChannelInfo {
            peer: self.peer.clone(),
            direction: Direction::Output,
            carrier: self.transport.carrier(),
            status: status_of(
                self.queue.is_closed() || self.peer_closed.load(Ordering::SeqCst),
                &degraded_reasons,
            ),
            queue_capacity,
            queued,
            sched: qos.sched.clone(),
            tos: qos.tos,
            counters,
            degraded_reasons,
        }
    }
}

#[derive(Debug, Default)]
struct InputCounters {
    received: u64,
    dropped: u64,
    acks: u64,
}

#[derive(Debug)]
struct InputChannel {
    key: u64,
    peer: PortName,
    transport: InTransport,
    qos: Mutex<ChannelQos>,
    counters: Mutex<InputCounters>,
    stop: AtomicBool,
    receiver_thread: Mutex<Option<ThreadHandle>>,
    done: Latch,
}

impl InputChannel {
    fn info(&self, inbox_capacity: usize) -> ChannelInfo {
        let c = lock(&self.counters);
        let qos = lock(&self.qos);
        let degraded_reasons = qos.degraded_reasons();
        ChannelInfo {
            peer: self.peer.clone(),
            direction: Direction::Input,
            carrier: match self.transport {
                InTransport::Tcp { .. } => CarrierId::Tcp,
                InTransport::Udp { .. } => CarrierId::Udp,
                InTransport::Emu { .. } => CarrierId::Emu,
            },
            status: status_of(self.stop.load(Ordering::SeqCst), &degraded_reasons),
            queue_capacity: inbox_capacity,
            queued: 0,
            sched: qos.sched.clone(),
            tos: qos.tos,
            counters: ChannelCounters {
                received: c.received,
                dropped: c.dropped,
                acks: c.acks,
                ..ChannelCounters::default()
            },
            degraded_reasons,
        }
    }
}

fn status_of(closed: bool, degraded: &[String]) -> ChannelStatus {
    if closed {
        ChannelStatus::Closed
    } else if degraded.is_empty() {
        ChannelStatus::Active
    } else {
        ChannelStatus::Degraded
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug)]
struct PortInner {
    name: PortName,
    config: PortConfig,
    local_addr: SocketAddr,
    names: Option<NameClient>,
    outputs: Mutex<BTreeMap<PortName, Arc<OutputChannel>>>,
    inputs: Mutex<BTreeMap<PortName, Arc<InputChannel>>>,
    retired: Mutex<Vec<ChannelInfo>>,
    inbox: Inbox,
    sessions: Mutex<Vec<TcpStream>>,
    next_message_id: AtomicU64,
    next_lane: AtomicU64,
    closed: AtomicBool,
    /// Serializes connect/disconnect so two admin sessions cannot race on one peer.
    topology_lock: Mutex<()>,
}

/// A named endpoint. Dropping the port closes every channel and unregisters
/// the name.
#[derive(Debug)]
pub struct Port {
    inner: Arc<PortInner>,
    acceptor: Option<JoinHandle<()>>,
}

impl Port {
    /// Binds the listener and registers the name. On any failure nothing
    /// stays bound or registered.
    pub fn open(name: PortName, config: PortConfig) -> Result<Port, PortError> {
        let listener =
            TcpListener::bind(config.listen).map_err(|e| PortError::Bind(e.to_string()))?;
        let local_addr = listener.local_addr()?;
        let names = config.nameserver.map(NameClient::new);
        if let Some(client) = &names {
            let ep = EndpointTriplet::new(local_addr.ip(), local_addr.port(), CarrierId::Tcp)
                .map_err(|e| PortError::Bind(e.to_string()))?;
            match client.register(&name, ep) {
                Ok(()) => {}
                Err(NameError::AlreadyRegistered) => return Err(PortError::NameAlreadyRegistered),
                Err(e) => return Err(PortError::Bind(format!("name server: {e}"))),
            }
        }
        let inner = Arc::new(PortInner {
            name,
            config,
            local_addr,
            names,
            outputs: Mutex::new(BTreeMap::new()),
            inputs: Mutex::new(BTreeMap::new()),
            retired: Mutex::new(Vec::new()),
            inbox: Inbox::default(),
            sessions: Mutex::new(Vec::new()),
            next_message_id: AtomicU64::new(0),
            next_lane: AtomicU64::new(0),
            closed: AtomicBool::new(false),
            topology_lock: Mutex::new(()),
        });
        let acc = Arc::clone(&inner);
        let acceptor = thread::Builder::new()
            .name(format!("accept{}", inner.name))
            .spawn(move || accept_loop(acc, listener))?;
        Ok(Port {
            inner,
            acceptor: Some(acceptor),
        })
    }

    pub fn name(&self) -> &PortName {
        &self.inner.name
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local_addr
    }

    /// The triplet this port registers.
    pub fn endpoint(&self) -> EndpointTriplet {
        EndpointTriplet::new(
            self.inner.local_addr.ip(),
            self.inner.local_addr.port(),
            CarrierId::Tcp,
        )
        .expect("bound port is non-zero")
    }

    /// Resolves `peer` through the name server and opens an output channel to it.
    pub fn connect(&self, peer: &PortName, carrier: CarrierId) -> Result<(), PortError> {
        self.inner.connect(peer, carrier)
    }

    /// Opens an output channel to an already-resolved endpoint; no name
    /// server traffic.
    pub fn connect_endpoint(
        &self,
        peer: &PortName,
        endpoint: &EndpointTriplet,
        carrier: CarrierId,
    ) -> Result<(), PortError> {
        self.inner.connect_endpoint(peer, endpoint, carrier)
    }

    /// Closes the output channel to `peer`, or failing that the input channel
    /// from `peer`. Queued messages are counted as dropped.
    pub fn disconnect(&self, peer: &PortName) -> Result<(), PortError> {
        self.inner.disconnect(peer)
    }

    /// Enqueues `message` on every output channel and returns without waiting
    /// for any transmission.
    pub fn publish(&self, message: Message) -> Vec<(PortName, EnqueueOutcome)> {
        self.inner.publish(message, false)
    }

    pub fn publish_bytes(&self, payload: impl Into<Bytes>) -> Vec<(PortName, EnqueueOutcome)> {
        self.publish(Message::new(payload))
    }

    /// Like [`publish`](Self::publish), asking each subscriber to acknowledge.
    pub fn publish_acked(&self, message: Message) -> Vec<(PortName, EnqueueOutcome)> {
        self.inner.publish(message, true)
    }

    /// Enqueues `message` on the output channel to `peer` only and returns
    /// the message id carried by its frame.
    pub fn publish_to(
        &self,
        peer: &PortName,
        message: Message,
        ack_requested: bool,
    ) -> Result<(u64, EnqueueOutcome), PortError> {
        self.inner.publish_to(peer, message, ack_requested)
    }

    /// Next message across all input channels. Non-blocking reads return
    /// `Ok(None)` when nothing is queued; blocking reads wait up to `timeout`
    /// (forever if `None`).
    pub fn read(
        &self,
        blocking: bool,
        timeout: Option<Duration>,
    ) -> Result<Option<Inbound>, PortError> {
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(PortError::Closed);
        }
        if !blocking {
            return Ok(self.inner.inbox.try_pop());
        }
        match self.inner.inbox.pop_wait(timeout) {
            Ok(m) => Ok(Some(m)),
            Err(true) => Err(PortError::Closed),
            Err(false) => Err(PortError::Timeout),
        }
    }

    pub fn try_read(&self) -> Option<Inbound> {
        self.inner.inbox.try_pop()
    }

    pub fn read_timeout(&self, timeout: Duration) -> Result<Inbound, PortError> {
        self.read(true, Some(timeout))
            .map(|m| m.expect("blocking read yields a message"))
    }

    /// Snapshot of the channel to or from `peer` (outputs take precedence).
    pub fn channel_info(&self, peer: &PortName) -> Result<ChannelInfo, PortError> {
        self.inner.channel_info(peer)
    }

    pub fn output_info(&self, peer: &PortName) -> Result<ChannelInfo, PortError> {
        lock(&self.inner.outputs)
            .get(peer)
            .map(|c| c.info())
            .ok_or(PortError::NoSuchChannel)
    }

    pub fn input_info(&self, peer: &PortName) -> Result<ChannelInfo, PortError> {
        let cap = self.inner.config.inbox_capacity;
        lock(&self.inner.inputs)
            .get(peer)
            .map(|c| c.info(cap))
            .ok_or(PortError::NoSuchChannel)
    }

    pub fn channels(&self) -> Vec<ChannelInfo> {
        self.inner.channels()
    }

    /// Final snapshots of channels closed since the port opened.
    pub fn retired_channels(&self) -> Vec<ChannelInfo> {
        lock(&self.inner.retired).clone()
    }

    pub fn set_channel_packet_priority(
        &self,
        peer: &PortName,
        class: PriorityClass,
    ) -> Result<ChannelInfo, PortError> {
        self.inner.set_tos(peer, class.tos())
    }

    /// Sets the raw TOS byte of outbound packets.
    pub fn set_channel_tos(&self, peer: &PortName, tos: u8) -> Result<ChannelInfo, PortError> {
        self.inner.set_tos(peer, tos)
    }

    /// Applies `request` to the channel thread. An OS refusal is not an
    /// error: the result has `applied == false` and a reason.
    pub fn set_channel_thread_sched(
        &self,
        peer: &PortName,
        request: SchedRequest,
    ) -> Result<SchedulingProperties, PortError> {
        self.inner.set_sched(peer, request)
    }

    pub fn set_channel_queue_capacity(
        &self,
        peer: &PortName,
        capacity: usize,
    ) -> Result<(), PortError> {
        self.inner.set_qlen(peer, capacity)
    }

    /// Runs one admin command against this port and returns the reply text.
    pub fn handle_admin(&self, command: &str) -> String {
        admin::handle_text(&self.inner, command)
    }

    /// Next acknowledgment received on the output channel to `peer`.
    pub fn recv_ack(
        &self,
        peer: &PortName,
        timeout: Duration,
    ) -> Result<Option<AckRecord>, PortError> {
        let ch = lock(&self.inner.outputs)
            .get(peer)
            .cloned()
            .ok_or(PortError::NoSuchChannel)?;
        Ok(ch.acks.recv(timeout))
    }

    pub fn take_acks(&self, peer: &PortName) -> Result<Vec<AckRecord>, PortError> {
        let ch = lock(&self.inner.outputs)
            .get(peer)
            .cloned()
            .ok_or(PortError::NoSuchChannel)?;
        Ok(ch.acks.drain())
    }

    /// Waits until the output channel to `peer` has nothing queued or in flight.
    pub fn flush(&self, peer: &PortName, timeout: Duration) -> Result<bool, PortError> {
        let ch = lock(&self.inner.outputs)
            .get(peer)
            .cloned()
            .ok_or(PortError::NoSuchChannel)?;
        Ok(ch.queue.wait_drained(timeout))
    }

    /// Closes every channel, stops the listener and unregisters the name.
    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if self.inner.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        let inner = &self.inner;
        // Wake the acceptor.
        let _ = TcpStream::connect_timeout(&inner.local_addr, Duration::from_millis(200));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let outs: Vec<PortName> = lock(&inner.outputs).keys().cloned().collect();
        for p in outs {
            let _ = inner.close_output(&p, Duration::from_millis(200));
        }
        let ins: Vec<Arc<InputChannel>> = lock(&inner.inputs).values().cloned().collect();
        for ch in ins {
            ch.stop.store(true, Ordering::SeqCst);
            ch.transport.shutdown();
            ch.done.wait(Duration::from_secs(1));
        }
        for s in lock(&inner.sessions).drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        inner.inbox.close();
        if let Some(client) = &inner.names {
            if let Err(e) = client.unregister(&inner.name) {
                log::warn!("unregister {}: {e}", inner.name);
            }
        }
    }
}

impl Drop for Port {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl PortInner {
    fn channels(&self) -> Vec<ChannelInfo> {
        let mut v: Vec<ChannelInfo> = lock(&self.outputs).values().map(|c| c.info()).collect();
        let cap = self.config.inbox_capacity;
        v.extend(lock(&self.inputs).values().map(|c| c.info(cap)));
        v
    }

    fn channel_info(&self, peer: &PortName) -> Result<ChannelInfo, PortError> {
        if let Some(c) = lock(&self.outputs).get(peer) {
            return Ok(c.info());
        }
        lock(&self.inputs)
            .get(peer)
            .map(|c| c.info(self.config.inbox_capacity))
            .ok_or(PortError::NoSuchChannel)
    }

    fn connect(&self, peer: &PortName, carrier: CarrierId) -> Result<(), PortError> {
        let client = self.names.as_ref().ok_or_else(|| {
            PortError::Lookup(NameError::Protocol("port has no name server".into()))
        })?;
        let ep = client.lookup(peer).map_err(PortError::Lookup)?;
        self.connect_endpoint(peer, &ep, carrier)
    }

    fn connect_endpoint(
        &self,
        peer: &PortName,
        ep: &EndpointTriplet,
        carrier: CarrierId,
    ) -> Result<(), PortError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(PortError::Closed);
        }
        let _guard = lock(&self.topology_lock);
        if lock(&self.outputs).contains_key(peer) {
            return Err(PortError::AlreadyConnected);
        }
        let mut info = HandshakeInfo::new(SessionRole::Data, self.name.clone(), carrier);
        let mut udp = None;
        match carrier {
            CarrierId::Tcp => {}
            CarrierId::Udp => {
                let s = UdpSocket::bind(SocketAddr::new(self.local_addr.ip(), 0))?;
                info = info.with_param("udp-port", s.local_addr()?.port());
                udp = Some(s);
            }
            CarrierId::Emu => {
                let emu = self.config.emu.as_ref().ok_or_else(|| {
                    PortError::CarrierUnsupported(
                        "port is not attached to an emulated network".into(),
                    )
                })?;
                info = info
                    .with_param("emu-net", emu.network.id())
                    .with_param("emu-host", &emu.host);
            }
        }
        let mut stream = TcpStream::connect_timeout(&ep.socket_addr(), CONNECT_TIMEOUT)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        stream.set_write_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let session = initiate_handshake(&mut stream, &info)?;
        stream.set_read_timeout(None)?;
        stream.set_write_timeout(None)?;
        if let Some(remote) = session.remote_params.get("name") {
            if remote != peer.as_str() {
                return Err(PortError::Handshake(HandshakeError::Rejected(format!(
                    "endpoint belongs to {remote}, not {peer}"
                ))));
            }
        }
        let param = |k: &str| {
            session
                .remote_params
                .get(k)
                .cloned()
                .ok_or_else(|| HandshakeError::Malformed(format!("reply lacks {k}")))
        };
        let (transport, acks) = match carrier {
            CarrierId::Tcp => {
                let reader = stream.try_clone()?;
                (OutTransport::Tcp { stream }, AckSource::Tcp(reader))
            }
            CarrierId::Udp => {
                let socket = udp.take().expect("bound above");
                let port: u16 = param("udp-port")?
                    .parse()
                    .map_err(|_| HandshakeError::Malformed("udp-port".into()))?;
                socket.connect(SocketAddr::new(ep.host, port))?;
                carrier::prepare_udp(&socket)?;
                carrier::prepare_control(&stream)?;
                let ack_socket = socket.try_clone()?;
                let ack_control = stream.try_clone()?;
                (
                    OutTransport::Udp {
                        socket,
                        control: stream,
                    },
                    AckSource::Udp {
                        socket: ack_socket,
                        control: ack_control,
                    },
                )
            }
            CarrierId::Emu => {
                let net = &self.config.emu.as_ref().expect("checked above").network;
                let parse_flow = |k: &str| -> Result<usize, PortError> {
                    param(k)?
                        .parse()
                        .map_err(|_| PortError::Handshake(HandshakeError::Malformed(k.into())))
                };
                let (fwd, rev) = (parse_flow("emu-fwd")?, parse_flow("emu-rev")?);
                let rx = net.receiver(rev).ok_or_else(|| {
                    HandshakeError::Malformed("emu reverse flow unavailable".into())
                })?;
                carrier::prepare_control(&stream)?;
                let ack_control = stream.try_clone()?;
                (
                    OutTransport::Emu {
                        flow: net.sender(fwd),
                        control: stream,
                    },
                    AckSource::Emu {
                        rx,
                        control: ack_control,
                    },
                )
            }
        };
        let ch = Arc::new(OutputChannel {
            peer: peer.clone(),
            queue: ChannelQueue::new(self.config.queue_capacity),
            transport,
            qos: Mutex::new(ChannelQos::default()),
            acks: AckLog::default(),
            stop: AtomicBool::new(false),
            peer_closed: AtomicBool::new(false),
            sender: Mutex::new(None),
            sender_thread: Mutex::new(None),
            ack_reader: Mutex::new(None),
            ack_done: Latch::default(),
        });
        let s = Arc::clone(&ch);
        let sender = thread::Builder::new()
            .name(format!("out{}", peer))
            .spawn(move || sender_loop(s))?;
        *lock(&ch.sender_thread) = Some(thread_handle_of(&sender));
        *lock(&ch.sender) = Some(sender);
        let a = Arc::clone(&ch);
        let reader = thread::Builder::new()
            .name(format!("ack{}", peer))
            .spawn(move || ack_loop(a, acks))?;
        *lock(&ch.ack_reader) = Some(reader);
        lock(&self.outputs).insert(peer.clone(), ch);
        log::debug!("{} -> {} connected over {}", self.name, peer, carrier);
        Ok(())
    }

    fn disconnect(&self, peer: &PortName) -> Result<(), PortError> {
        let _guard = lock(&self.topology_lock);
        match self.close_output(peer, DISCONNECT_LINGER) {
            Err(PortError::NoSuchChannel) => self.close_input(peer),
            other => other,
        }
    }

    fn close_output(&self, peer: &PortName, linger: Duration) -> Result<(), PortError> {
        let ch = lock(&self.outputs)
            .remove(peer)
            .ok_or(PortError::NoSuchChannel)?;
        ch.stop.store(true, Ordering::SeqCst);
        ch.queue.close();
        if !ch.queue.wait_drained(linger) {
            // The sender is stuck in a write the peer never drains.
            ch.transport.abort();
        }
        if let Some(h) = lock(&ch.sender).take() {
            let _ = h.join();
        }
        ch.transport.close(linger);
        if !ch.ack_done.wait(linger) {
            ch.transport.abort();
        }
        if let Some(h) = lock(&ch.ack_reader).take() {
            let _ = h.join();
        }
        let mut info = ch.info();
        info.status = ChannelStatus::Closed;
        lock(&self.retired).push(info);
        Ok(())
    }

    fn close_input(&self, peer: &PortName) -> Result<(), PortError> {
        let ch = lock(&self.inputs)
            .get(peer)
            .cloned()
            .ok_or(PortError::NoSuchChannel)?;
        ch.stop.store(true, Ordering::SeqCst);
        ch.transport.shutdown();
        ch.done.wait(DISCONNECT_LINGER);
        Ok(())
    }

    fn publish(&self, message: Message, ack_requested: bool) -> Vec<(PortName, EnqueueOutcome)> {
        let outs: Vec<Arc<OutputChannel>> = lock(&self.outputs).values().cloned().collect();
        if outs.is_empty() {
            return Vec::new();
        }
        let id = self.next_message_id.fetch_add(1, Ordering::Relaxed);
        outs.into_iter()
            .map(|ch| {
                let outcome = enqueue(&ch, id, message.clone(), ack_requested);
                (ch.peer.clone(), outcome)
            })
            .collect()
    }

    fn publish_to(
        &self,
        peer: &PortName,
        message: Message,
        ack_requested: bool,
    ) -> Result<(u64, EnqueueOutcome), PortError> {
        let ch = lock(&self.outputs)
            .get(peer)
            .cloned()
            .ok_or(PortError::NoSuchChannel)?;
        let id = self.next_message_id.fetch_add(1, Ordering::Relaxed);
        Ok((id, enqueue(&ch, id, message, ack_requested)))
    }

    fn set_tos(&self, peer: &PortName, tos: u8) -> Result<ChannelInfo, PortError> {
        self.apply_tos(peer, tos)?;
        self.channel_info(peer)
    }

    /// Marks the channel's packets; returns the socket's refusal, if any.
    fn apply_tos(&self, peer: &PortName, tos: u8) -> Result<Option<String>, PortError> {
        if let Some(ch) = lock(&self.outputs).get(peer).cloned() {
            let mut q = lock(&ch.qos);
            q.tos = tos;
            q.tos_refusal = ch.transport.set_tos(tos).err();
            return Ok(q.tos_refusal.clone());
        }
        let ch = lock(&self.inputs)
            .get(peer)
            .cloned()
            .ok_or(PortError::NoSuchChannel)?;
        let mut q = lock(&ch.qos);
        q.tos = tos;
        q.tos_refusal = ch.transport.set_tos(tos).err();
        Ok(q.tos_refusal.clone())
    }

    fn set_sched(
        &self,
        peer: &PortName,
        req: SchedRequest,
    ) -> Result<SchedulingProperties, PortError> {
        let scheduler = &self.config.scheduler;
        if let Some(ch) = lock(&self.outputs).get(peer).cloned() {
            let mut q = lock(&ch.qos);
            let thread = *lock(&ch.sender_thread);
            let outcome = match thread {
                Some(t) => scheduler.apply(t, &req),
                None => Err(crate::qos::SchedRefusal::new("no-thread")),
            };
            ch.transport.set_thread_rank(req.rank());
            q.sched = SchedulingProperties::from_outcome(req, outcome);
            return Ok(q.sched.clone());
        }
        let ch = lock(&self.inputs)
            .get(peer)
            .cloned()
            .ok_or(PortError::NoSuchChannel)?;
        let mut q = lock(&ch.qos);
        let thread = *lock(&ch.receiver_thread);
        let outcome = match thread {
            Some(t) => scheduler.apply(t, &req),
            None => Err(crate::qos::SchedRefusal::new("no-thread")),
        };
        ch.transport.set_thread_rank(req.rank());
        q.sched = SchedulingProperties::from_outcome(req, outcome);
        Ok(q.sched.clone())
    }

    fn set_qlen(&self, peer: &PortName, capacity: usize) -> Result<(), PortError> {
        match lock(&self.outputs).get(peer) {
            Some(ch) => {
                ch.queue.set_capacity(capacity);
                Ok(())
            }
            None if lock(&self.inputs).contains_key(peer) => Ok(()),
            None => Err(PortError::NoSuchChannel),
        }
    }

    /// Acceptor-side handshake policy for data sessions.
    fn negotiate(
        &self,
        info: &HandshakeInfo,
        peer_ip: IpAddr,
        prep: &mut AcceptPrep,
    ) -> Result<BTreeMap<String, String>, Rejection> {
        let mut reply = BTreeMap::new();
        reply.insert("name".to_string(), self.name.to_string());
        if info.session_role == SessionRole::Admin {
            return Ok(reply);
        }
        if lock(&self.inputs).contains_key(&info.source_port_name) {
            return Err(Rejection::Other("already-connected".into()));
        }
        match info.requested_carrier {
            CarrierId::Tcp => {}
            CarrierId::Udp => {
                let their: u16 = info
                    .params
                    .get("udp-port")
                    .and_then(|p| p.parse().ok())
                    .ok_or(Rejection::Other("missing udp-port".into()))?;
                let s = UdpSocket::bind(SocketAddr::new(self.local_addr.ip(), 0))
                    .map_err(|e| Rejection::Other(e.to_string()))?;
                s.connect(SocketAddr::new(peer_ip, their))
                    .map_err(|e| Rejection::Other(e.to_string()))?;
                let port = s
                    .local_addr()
                    .map_err(|e| Rejection::Other(e.to_string()))?
                    .port();
                reply.insert("udp-port".into(), port.to_string());
                prep.udp = Some(s);
            }
            CarrierId::Emu => {
                let emu = self
                    .config
                    .emu
                    .as_ref()
                    .ok_or(Rejection::CarrierUnsupported)?;
                let same_net = info
                    .params
                    .get("emu-net")
                    .and_then(|n| n.parse::<u64>().ok())
                    == Some(emu.network.id());
                let their_host = info
                    .params
                    .get("emu-host")
                    .ok_or(Rejection::CarrierUnsupported)?;
                if !same_net {
                    return Err(Rejection::CarrierUnsupported);
                }
                let fwd = emu
                    .network
                    .open_flow(FlowSpec::new(their_host, &emu.host))
                    .map_err(|e| Rejection::Other(e.to_string()))?;
                let rev = emu
                    .network
                    .open_flow(FlowSpec::new(&emu.host, their_host))
                    .map_err(|e| Rejection::Other(e.to_string()))?;
                reply.insert("emu-fwd".into(), fwd.to_string());
                reply.insert("emu-rev".into(), rev.to_string());
                prep.emu = Some((fwd, rev));
            }
        }
        Ok(reply)
    }
}

fn thread_handle_of<T>(h: &JoinHandle<T>) -> ThreadHandle {
    ThreadHandle::from_raw(h.as_pthread_t())
}

#[derive(Debug, Default)]
struct AcceptPrep {
    udp: Option<UdpSocket>,
    emu: Option<(usize, usize)>,
}

fn accept_loop(inner: Arc<PortInner>, listener: TcpListener) {
    for conn in listener.incoming() {
        if inner.closed.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::debug!("accept on {}: {e}", inner.name);
                continue;
            }
        };
        let inner = Arc::clone(&inner);
        let spawned = thread::Builder::new()
            .name(format!("in{}", inner.name))
            .spawn(move || serve_connection(inner, stream));
        if let Err(e) = spawned {
            log::warn!("cannot spawn connection thread: {e}");
        }
    }
}

/// Runs on a fresh thread per accepted connection. After the handshake this
/// thread becomes the channel's receiver thread or the admin session.
fn serve_connection(inner: Arc<PortInner>, mut stream: TcpStream) {
    let peer_ip = match stream.peer_addr() {
        Ok(a) => a.ip(),
        Err(_) => return,
    };
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT));
    let _ = stream.set_write_timeout(Some(HANDSHAKE_TIMEOUT));
    let mut prep = AcceptPrep::default();
    let result = accept_handshake(&mut stream, |info| {
        inner.negotiate(info, peer_ip, &mut prep)
    });
    let (session, info) = match result {
        Ok(v) => v,
        Err(e) => {
            log::debug!("handshake on {} failed: {e}", inner.name);
            if let Some((fwd, rev)) = prep.emu {
                let net = &inner.config.emu.as_ref().expect("emu prepared").network;
                net.close_flow(fwd);
                net.close_flow(rev);
            }
            return;
        }
    };
    let _ = stream.set_read_timeout(None);
    let _ = stream.set_write_timeout(None);
    if inner.closed.load(Ordering::SeqCst) {
        return;
    }
    match session.role {
        SessionRole::Admin => {
            if let Ok(s) = stream.try_clone() {
                lock(&inner.sessions).push(s);
            }
            admin::serve_session(&inner, stream);
        }
        SessionRole::Data => {
            if let Err(e) = run_input(&inner, info.source_port_name, session.carrier, stream, prep)
            {
                log::debug!("input channel on {} failed: {e}", inner.name);
            }
        }
    }
}

fn run_input(
    inner: &Arc<PortInner>,
    peer: PortName,
    carrier: CarrierId,
    stream: TcpStream,
    mut prep: AcceptPrep,
) -> io::Result<()> {
    let transport = match carrier {
        CarrierId::Tcp => {
            let reply = Mutex::new(stream.try_clone()?);
            InTransport::Tcp { stream, reply }
        }
        CarrierId::Udp => {
            let socket = prep.udp.take().expect("bound during negotiation");
            carrier::prepare_udp(&socket)?;
            carrier::prepare_control(&stream)?;
            InTransport::Udp {
                socket,
                control: stream,
            }
        }
        CarrierId::Emu => {
            let (fwd, rev) = prep.emu.expect("flows opened during negotiation");
            let net = &inner.config.emu.as_ref().expect("emu attached").network;
            let rx = net
                .receiver(fwd)
                .ok_or_else(|| io::Error::other("emu flow receiver taken"))?;
            carrier::prepare_control(&stream)?;
            InTransport::Emu {
                rx,
                reply: net.sender(rev),
                control: stream,
            }
        }
    };
    let key = inner.next_lane.fetch_add(1, Ordering::Relaxed);
    let ch = Arc::new(InputChannel {
        key,
        peer: peer.clone(),
        transport,
        qos: Mutex::new(ChannelQos::default()),
        counters: Mutex::new(InputCounters::default()),
        stop: AtomicBool::new(false),
        receiver_thread: Mutex::new(Some(current_thread())),
        done: Latch::default(),
    });
    inner.inbox.add_lane(key, peer.clone());
    lock(&inner.inputs).insert(peer.clone(), Arc::clone(&ch));
    receiver_loop(inner, &ch);
    // Remove before releasing the transport so that a peer waiting for the
    // close observes the channel already gone.
    let info = {
        let mut inputs = lock(&inner.inputs);
        if inputs.get(&peer).is_some_and(|c| Arc::ptr_eq(c, &ch)) {
            inputs.remove(&peer);
        }
        let mut i = ch.info(inner.config.inbox_capacity);
        i.status = ChannelStatus::Closed;
        i
    };
    lock(&inner.retired).push(info);
    inner.inbox.retire_lane(key);
    ch.transport.shutdown();
    ch.done.set();
    Ok(())
}

fn receiver_loop(inner: &PortInner, ch: &InputChannel) {
    let capacity = inner.config.inbox_capacity;
    while !ch.stop.load(Ordering::SeqCst) {
        let frame = match ch.transport.recv() {
            RecvOutcome::Frame(f) => f,
            RecvOutcome::Idle => continue,
            RecvOutcome::Closed => break,
        };
        if !SessionRole::Data.permits(frame.frame_type) {
            log::warn!(
                "{}: {:?} frame on data session from {}",
                inner.name,
                frame.frame_type,
                ch.peer
            );
            break;
        }
        if frame.frame_type != FrameType::Data {
            continue;
        }
        if frame.ack_requested() {
            match ch.transport.send_ack(&frame.ack()) {
                Ok(()) => lock(&ch.counters).acks += 1,
                Err(e) => log::debug!("ack to {} failed: {e}", ch.peer),
            }
        }
        let message = Message {
            payload: frame.payload,
            publish_timestamp_ns: frame.timestamp_ns,
        };
        let kept = inner
            .inbox
            .push(ch.key, capacity, frame.message_id, message);
        let mut c = lock(&ch.counters);
        c.received += 1;
        if !kept {
            c.dropped += 1;
        }
    }
}

fn enqueue(ch: &OutputChannel, id: u64, message: Message, ack_requested: bool) -> EnqueueOutcome {
    if message.payload.len() > ch.transport.max_payload() {
        ch.queue.reject();
        return EnqueueOutcome::Rejected;
    }
    ch.queue.push(Outgoing {
        id,
        message,
        ack_requested,
    })
}

fn sender_loop(ch: Arc<OutputChannel>) {
    while !ch.stop.load(Ordering::SeqCst) {
        if !ch.queue.wait_nonempty(POLL * 5) {
            continue;
        }
        if !ch.transport.wait_ready(POLL * 5) {
            continue;
        }
        let Some(item) = ch.queue.take() else {
            continue;
        };
        let flags = if item.ack_requested {
            FLAG_ACK_REQUESTED
        } else {
            0
        };
        let frame = Frame::new(
            FrameType::Data,
            item.id,
            item.message.publish_timestamp_ns,
            item.message.payload,
        )
        .with_flags(flags);
        let ok = match ch.transport.send(&frame) {
            Ok(()) => true,
            Err(e) => {
                log::debug!("send to {} failed: {e}", ch.peer);
                false
            }
        };
        ch.queue.finish(ok);
        if !ok && ch.transport.carrier() == CarrierId::Tcp {
            ch.peer_closed.store(true, Ordering::SeqCst);
            ch.queue.close();
        }
    }
}

fn ack_loop(ch: Arc<OutputChannel>, source: AckSource) {
    loop {
        match source.recv() {
            RecvOutcome::Frame(f) if f.frame_type == FrameType::Ack => {
                let ack_ns = monotonic_ns();
                ch.queue.record_ack();
                ch.acks.push(AckRecord {
                    message_id: f.message_id,
                    send_ns: f.timestamp_ns,
                    ack_ns,
                });
            }
            RecvOutcome::Frame(_) | RecvOutcome::Idle => {}
            RecvOutcome::Closed => break,
        }
        if ch.stop.load(Ordering::SeqCst) && !matches!(source, AckSource::Tcp(_)) {
            break;
        }
    }
    if !ch.stop.load(Ordering::SeqCst) {
        ch.peer_closed.store(true, Ordering::SeqCst);
        ch.queue.close();
    }
    ch.ack_done.set();
}
