use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;

use super::topology::{EmuTopology, FlowId, FlowSpec, TopologyError};

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

/// Idle wake-up interval of the driver thread.
const DRIVER_IDLE: Duration = Duration::from_millis(50);

#[derive(Debug)]
struct State {
    topology: EmuTopology,
    mailboxes: HashMap<FlowId, Sender<Bytes>>,
    pending_receivers: HashMap<FlowId, Receiver<Bytes>>,
    flow_hosts: HashMap<FlowId, (String, String)>,
    closed: HashSet<FlowId>,
    blocked: HashSet<(String, String)>,
    in_flight: HashMap<FlowId, usize>,
}

#[derive(Debug)]
struct Shared {
    id: u64,
    start: Instant,
    state: Mutex<State>,
    /// Signals the driver that new events were scheduled.
    wake: Condvar,
    /// Signals senders that a host pair was unblocked.
    ready: Condvar,
}

impl Shared {
    fn virtual_now(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// An [`EmuTopology`] whose virtual clock follows the wall clock, so real
/// channel threads can send frames through it.
///
/// A driver thread advances the topology and hands delivered frames to
/// per-flow mailboxes. Cloning is cheap; the driver exits shortly after the
/// last clone is dropped.
#[derive(Debug, Clone)]
pub struct EmuNetwork {
    shared: Arc<Shared>,
}

impl EmuNetwork {
    pub fn new(topology: EmuTopology) -> EmuNetwork {
        let shared = Arc::new(Shared {
            id: NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed),
            start: Instant::now(),
            state: Mutex::new(State {
                topology,
                mailboxes: HashMap::new(),
                pending_receivers: HashMap::new(),
                flow_hosts: HashMap::new(),
                closed: HashSet::new(),
                blocked: HashSet::new(),
                in_flight: HashMap::new(),
            }),
            wake: Condvar::new(),
            ready: Condvar::new(),
        });
        let weak = Arc::downgrade(&shared);
        thread::Builder::new()
            .name(format!("emu-driver-{}", shared.id))
            .spawn(move || drive(weak))
            .expect("spawn emu driver");
        EmuNetwork { shared }
    }

    /// Process-unique id; lets two ports check they share a network.
    pub fn id(&self) -> u64 {
        self.shared.id
    }

    pub fn has_host(&self, name: &str) -> bool {
        self.shared.lock().topology.has_host(name)
    }

    /// Creates a flow and its delivery mailbox. Take the receiving end with
    /// [`EmuNetwork::receiver`].
    pub fn open_flow(&self, spec: FlowSpec) -> Result<FlowId, TopologyError> {
        let mut st = self.shared.lock();
        let hosts = (spec.src.clone(), spec.dst.clone());
        let id = st.topology.add_flow(spec)?;
        let (tx, rx) = mpsc::channel();
        st.mailboxes.insert(id, tx);
        st.pending_receivers.insert(id, rx);
        st.flow_hosts.insert(id, hosts);
        Ok(id)
    }

    /// The receiving end of a flow's mailbox; available once.
    pub fn receiver(&self, flow: FlowId) -> Option<EmuReceiver> {
        self.shared
            .lock()
            .pending_receivers
            .remove(&flow)
            .map(|rx| EmuReceiver {
                rx: std::sync::Mutex::new(rx),
            })
    }

    pub fn sender(&self, flow: FlowId) -> EmuFlowHandle {
        EmuFlowHandle {
            net: self.clone(),
            flow,
        }
    }

    /// Stops deliveries on a flow; its receiver sees a disconnect.
    pub fn close_flow(&self, flow: FlowId) {
        let mut st = self.shared.lock();
        st.mailboxes.remove(&flow);
        st.pending_receivers.remove(&flow);
        st.closed.insert(flow);
        drop(st);
        self.shared.ready.notify_all();
    }

    /// While blocked, flows from `from` to `to` report not ready and accept
    /// no frames. Frames already in the network are unaffected.
    pub fn set_blocked(&self, from: &str, to: &str, blocked: bool) {
        let mut st = self.shared.lock();
        let key = (from.to_string(), to.to_string());
        if blocked {
            st.blocked.insert(key);
        } else {
            st.blocked.remove(&key);
        }
        drop(st);
        self.shared.ready.notify_all();
    }

    pub fn set_link_lossy(&self, from: &str, to: &str, lossy: bool) -> Result<(), TopologyError> {
        self.shared.lock().topology.set_link_lossy(from, to, lossy)
    }

    /// Runs `f` with the topology locked, e.g. to read link statistics.
    pub fn with_topology<R>(&self, f: impl FnOnce(&mut EmuTopology) -> R) -> R {
        f(&mut self.shared.lock().topology)
    }

    fn is_blocked(st: &State, flow: FlowId) -> bool {
        st.flow_hosts
            .get(&flow)
            .is_some_and(|h| st.blocked.contains(h))
    }
}

fn drive(weak: Weak<Shared>) {
    loop {
        let Some(shared) = weak.upgrade() else { return };
        let mut st = shared.lock();
        let now = shared.virtual_now();
        let delivered = st.topology.step(now);
        for d in delivered {
            if let Some(n) = st.in_flight.get_mut(&d.flow) {
                *n = n.saturating_sub(1);
            }
            if let (Some(tx), Some(p)) = (st.mailboxes.get(&d.flow), d.payload) {
                let _ = tx.send(p);
            }
        }
        for loss in st.topology.take_losses() {
            if let Some(n) = st.in_flight.get_mut(&loss.flow) {
                *n = n.saturating_sub(1);
            }
        }
        let wait = match st.topology.next_event_time() {
            Some(t) => {
                Duration::from_nanos(t.saturating_sub(shared.virtual_now())).min(DRIVER_IDLE)
            }
            None => DRIVER_IDLE,
        };
        if !wait.is_zero() {
            let (guard, _) = shared
                .wake
                .wait_timeout(st, wait)
                .unwrap_or_else(|e| e.into_inner());
            drop(guard);
        } else {
            drop(st);
        }
        drop(shared);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmuSendError {
    Closed,
    Blocked,
}

/// Sending side of one flow.
#[derive(Debug, Clone)]
pub struct EmuFlowHandle {
    net: EmuNetwork,
    flow: FlowId,
}

impl EmuFlowHandle {
    pub fn flow(&self) -> FlowId {
        self.flow
    }

    pub fn network(&self) -> &EmuNetwork {
        &self.net
    }

    /// Submits one frame now. Its size on the wire is the frame length plus
    /// the flow's transport overhead.
    pub fn send(&self, frame: Bytes) -> Result<(), EmuSendError> {
        let shared = &self.net.shared;
        let mut st = shared.lock();
        if st.closed.contains(&self.flow) {
            return Err(EmuSendError::Closed);
        }
        if EmuNetwork::is_blocked(&st, self.flow) {
            return Err(EmuSendError::Blocked);
        }
        let now = shared.virtual_now();
        let size = frame.len() as u32;
        st.topology.submit_at(now, self.flow, size, 0, Some(frame));
        *st.in_flight.entry(self.flow).or_default() += 1;
        drop(st);
        shared.wake.notify_all();
        Ok(())
    }

    /// Waits until the flow accepts frames. Returns false on timeout or if
    /// the flow was closed.
    pub fn wait_ready(&self, timeout: Duration) -> bool {
        let shared = &self.net.shared;
        let deadline = Instant::now() + timeout;
        let mut st = shared.lock();
        loop {
            if st.closed.contains(&self.flow) {
                return false;
            }
            if !EmuNetwork::is_blocked(&st, self.flow) {
                return true;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            st = shared
                .ready
                .wait_timeout(st, left)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn is_ready(&self) -> bool {
        let st = self.net.shared.lock();
        !st.closed.contains(&self.flow) && !EmuNetwork::is_blocked(&st, self.flow)
    }

    /// Frames submitted but neither delivered nor lost.
    pub fn in_flight(&self) -> usize {
        self.net
            .shared
            .lock()
            .in_flight
            .get(&self.flow)
            .copied()
            .unwrap_or(0)
    }

    /// TOS applied to frames sent from now on.
    pub fn set_tos(&self, tos: u8) {
        self.net.shared.lock().topology.set_flow_tos(self.flow, tos);
    }

    /// NIC admission rank of the flow's sending thread.
    pub fn set_thread_rank(&self, rank: i32) {
        self.net
            .shared
            .lock()
            .topology
            .set_flow_thread_rank(self.flow, rank);
    }
}

/// Receiving side of one flow.
#[derive(Debug)]
pub struct EmuReceiver {
    rx: std::sync::Mutex<Receiver<Bytes>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmuRecvError {
    Timeout,
    Closed,
}

impl EmuReceiver {
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Bytes, EmuRecvError> {
        let rx = self.rx.lock().unwrap_or_else(|e| e.into_inner());
        rx.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => EmuRecvError::Timeout,
            RecvTimeoutError::Disconnected => EmuRecvError::Closed,
        })
    }
}
