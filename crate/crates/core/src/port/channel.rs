use std::collections::VecDeque;
use std::fmt;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use bytes::Bytes;

use crate::nameserver::PortName;
use crate::qos::{DscpCodepoint, PriorityClass, SchedulingProperties};
use crate::wire::CarrierId;

pub const DEFAULT_QUEUE_CAPACITY: usize = 64;
pub const DEFAULT_INBOX_CAPACITY: usize = 1024;
/// Acknowledgment records kept per output channel before the oldest are discarded.
const ACK_LOG_CAPACITY: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Input,
    Output,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Input => "input",
            Direction::Output => "output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelStatus {
    Connecting,
    Active,
    /// Running, but some QoS request was refused by the OS.
    Degraded,
    Closed,
}

impl ChannelStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelStatus::Connecting => "connecting",
            ChannelStatus::Active => "active",
            ChannelStatus::Degraded => "degraded",
            ChannelStatus::Closed => "closed",
        }
    }
}

impl fmt::Display for ChannelStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An application message. The payload is shared, never copied per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub payload: Bytes,
    pub publish_timestamp_ns: u64,
}

impl Message {
    pub fn new(payload: impl Into<Bytes>) -> Self {
        Message {
            payload: payload.into(),
            publish_timestamp_ns: crate::clock::monotonic_ns(),
        }
    }
}

/// A message taken from one of the port's input channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inbound {
    pub peer: PortName,
    pub message_id: u64,
    pub message: Message,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelCounters {
    /// Messages accepted into the output queue.
    pub enqueued: u64,
    pub sent: u64,
    pub received: u64,
    /// Evicted by a full queue, unsendable, or discarded at disconnect.
    pub dropped: u64,
    /// ACK frames received (output) or sent (input).
    pub acks: u64,
    /// Publishes refused before queuing because the carrier cannot carry them.
    pub rejected: u64,
    /// Taken from the queue by the channel thread and not yet handed to the carrier.
    pub in_flight: u64,
}

/// Snapshot of one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelInfo {
    pub peer: PortName,
    pub direction: Direction,
    pub carrier: CarrierId,
    pub status: ChannelStatus,
    pub queue_capacity: usize,
    pub queued: usize,
    pub sched: SchedulingProperties,
    /// TOS byte applied to outbound packets.
    pub tos: u8,
    pub counters: ChannelCounters,
    pub degraded_reasons: Vec<String>,
}

impl ChannelInfo {
    /// The priority class whose codepoint the TOS carries; other codepoints
    /// read as Normal.
    pub fn packet_priority(&self) -> PriorityClass {
        PriorityClass::from_dscp(self.dscp()).unwrap_or_default()
    }

    pub fn dscp(&self) -> DscpCodepoint {
        DscpCodepoint::from_tos(self.tos)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Outgoing {
    pub id: u64,
    pub message: Message,
    pub ack_requested: bool,
}

#[derive(Debug)]
struct QueueState {
    items: VecDeque<Outgoing>,
    capacity: usize,
    counters: ChannelCounters,
    closed: bool,
    /// In-flight frames already booked as sent because their ack beat `finish`.
    acked_early: u64,
}

/// Bounded drop-oldest queue between publishers and one channel thread.
#[derive(Debug)]
pub(crate) struct ChannelQueue {
    state: Mutex<QueueState>,
    cond: Condvar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Queued,
    /// Queued after evicting the oldest pending message.
    QueuedDroppedOldest,
    /// The channel is closed; counted as dropped.
    Closed,
    /// The carrier cannot carry the message.
    Rejected,
}

impl ChannelQueue {
    pub fn new(capacity: usize) -> Self {
        ChannelQueue {
            state: Mutex::new(QueueState {
                items: VecDeque::with_capacity(capacity.min(1024)),
                capacity: capacity.max(1),
                counters: ChannelCounters::default(),
                closed: false,
                acked_early: 0,
            }),
            cond: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, item: Outgoing) -> EnqueueOutcome {
        let mut st = self.lock();
        st.counters.enqueued += 1;
        if st.closed {
            st.counters.dropped += 1;
            return EnqueueOutcome::Closed;
        }
        let mut outcome = EnqueueOutcome::Queued;
        if st.items.len() >= st.capacity {
            st.items.pop_front();
            st.counters.dropped += 1;
            outcome = EnqueueOutcome::QueuedDroppedOldest;
        }
        st.items.push_back(item);
        drop(st);
        self.cond.notify_all();
        outcome
    }

    pub fn reject(&self) {
        self.lock().counters.rejected += 1;
    }

    /// Blocks until a message is queued. False on timeout or close.
    pub fn wait_nonempty(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if st.closed {
                return false;
            }
            if !st.items.is_empty() {
                return true;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            st = self
                .cond
                .wait_timeout(st, left)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Takes the oldest message; it counts as in flight until [`finish`](Self::finish).
    pub fn take(&self) -> Option<Outgoing> {
        let mut st = self.lock();
        let item = st.items.pop_front()?;
        st.counters.in_flight += 1;
        drop(st);
        self.cond.notify_all();
        Some(item)
    }

    pub fn finish(&self, sent: bool) {
        let mut st = self.lock();
        if st.acked_early > 0 {
            st.acked_early -= 1;
            return;
        }
        st.counters.in_flight -= 1;
        if sent {
            st.counters.sent += 1;
        } else {
            st.counters.dropped += 1;
        }
        drop(st);
        self.cond.notify_all();
    }

    pub fn set_capacity(&self, capacity: usize) {
        let mut st = self.lock();
        st.capacity = capacity.max(1);
        while st.items.len() > st.capacity {
            st.items.pop_front();
            st.counters.dropped += 1;
        }
    }

    pub fn record_ack(&self) {
        let mut st = self.lock();
        st.counters.acks += 1;
        if st.counters.in_flight > st.acked_early {
            st.acked_early += 1;
            st.counters.in_flight -= 1;
            st.counters.sent += 1;
        }
    }

    /// Stops the queue; everything still queued is counted as dropped.
    pub fn close(&self) {
        let mut st = self.lock();
        st.closed = true;
        let n = st.items.len() as u64;
        st.items.clear();
        st.counters.dropped += n;
        drop(st);
        self.cond.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    /// Waits until nothing is queued or in flight. False on timeout.
    pub fn wait_drained(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if st.items.is_empty() && st.counters.in_flight == 0 {
                return true;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            st = self
                .cond
                .wait_timeout(st, left)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// (capacity, queued, counters) read under one lock.
    pub fn snapshot(&self) -> (usize, usize, ChannelCounters) {
        let st = self.lock();
        (st.capacity, st.items.len(), st.counters)
    }
}

/// Acknowledgment of one DATA frame, timed on the sender's clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckRecord {
    pub message_id: u64,
    pub send_ns: u64,
    pub ack_ns: u64,
}

impl AckRecord {
    pub fn rtt_ns(&self) -> u64 {
        self.ack_ns.saturating_sub(self.send_ns)
    }
}

#[derive(Debug, Default)]
pub(crate) struct AckLog {
    records: Mutex<VecDeque<AckRecord>>,
    cond: Condvar,
}

impl AckLog {
    pub fn push(&self, r: AckRecord) {
        let mut q = self.records.lock().unwrap_or_else(|e| e.into_inner());
        if q.len() >= ACK_LOG_CAPACITY {
            q.pop_front();
        }
        q.push_back(r);
        drop(q);
        self.cond.notify_all();
    }

    pub fn recv(&self, timeout: Duration) -> Option<AckRecord> {
        let deadline = Instant::now() + timeout;
        let mut q = self.records.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(r) = q.pop_front() {
                return Some(r);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return None;
            }
            q = self
                .cond
                .wait_timeout(q, left)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn drain(&self) -> Vec<AckRecord> {
        self.records
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .drain(..)
            .collect()
    }
}

#[derive(Debug)]
struct InboxLane {
    key: u64,
    peer: PortName,
    items: VecDeque<(u64, Message)>,
}

#[derive(Debug, Default)]
struct InboxState {
    lanes: Vec<InboxLane>,
    cursor: usize,
    closed: bool,
}

/// Per-input-channel FIFOs read round-robin.
#[derive(Debug, Default)]
pub(crate) struct Inbox {
    state: Mutex<InboxState>,
    cond: Condvar,
}

impl Inbox {
    fn lock(&self) -> MutexGuard<'_, InboxState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn add_lane(&self, key: u64, peer: PortName) {
        self.lock().lanes.push(InboxLane {
            key,
            peer,
            items: VecDeque::new(),
        });
    }

    /// Messages already received stay readable after the channel goes away.
    pub fn retire_lane(&self, key: u64) {
        let mut st = self.lock();
        if let Some(i) = st
            .lanes
            .iter()
            .position(|l| l.key == key && l.items.is_empty())
        {
            st.lanes.remove(i);
        }
    }

    /// Appends a message; returns false if the lane was full and its oldest
    /// message was evicted.
    pub fn push(&self, key: u64, capacity: usize, id: u64, msg: Message) -> bool {
        let mut st = self.lock();
        let Some(lane) = st.lanes.iter_mut().find(|l| l.key == key) else {
            return false;
        };
        let mut kept = true;
        if lane.items.len() >= capacity.max(1) {
            lane.items.pop_front();
            kept = false;
        }
        lane.items.push_back((id, msg));
        drop(st);
        self.cond.notify_all();
        kept
    }

    fn pop_locked(st: &mut InboxState) -> Option<Inbound> {
        let n = st.lanes.len();
        for step in 0..n {
            let i = (st.cursor + step) % n;
            if let Some((id, message)) = st.lanes[i].items.pop_front() {
                let peer = st.lanes[i].peer.clone();
                st.cursor = (i + 1) % n;
                return Some(Inbound {
                    peer,
                    message_id: id,
                    message,
                });
            }
        }
        None
    }

    pub fn try_pop(&self) -> Option<Inbound> {
        Self::pop_locked(&mut self.lock())
    }

    /// `Err(true)` when closed, `Err(false)` on timeout.
    pub fn pop_wait(&self, timeout: Option<Duration>) -> Result<Inbound, bool> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.lock();
        loop {
            if let Some(m) = Self::pop_locked(&mut st) {
                return Ok(m);
            }
            if st.closed {
                return Err(true);
            }
            st = match deadline {
                None => self.cond.wait(st).unwrap_or_else(|e| e.into_inner()),
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(false);
                    }
                    self.cond
                        .wait_timeout(st, left)
                        .unwrap_or_else(|e| e.into_inner())
                        .0
                }
            };
        }
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.cond.notify_all();
    }
}
