use std::collections::VecDeque;

use crate::qos::{tos_to_band, Band};

pub const DEFAULT_BAND_CAPACITY: usize = 1000;

/// A packet as seen by the emulator's queues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmuPacket {
    /// Unique within a topology.
    pub id: u64,
    pub tos: u8,
    /// Bytes on the wire, headers included.
    pub size_bytes: u32,
    /// Node the packet entered the current queue from.
    pub ingress: usize,
    /// Admission number assigned by the queue that holds the packet.
    pub enqueue_seq: u64,
    /// Message this packet is a segment of.
    pub message: u64,
    pub flow: usize,
    /// Index into the flow's route of the link currently carrying the packet.
    pub hop: usize,
    pub enqueued_at_ns: u64,
    /// Time spent queued while a lower-band packet held the link.
    pub lower_band_wait_ns: u64,
}

impl EmuPacket {
    /// A free-standing packet, for driving a [`BandQueue`] directly.
    pub fn new(id: u64, tos: u8, size_bytes: u32) -> Self {
        EmuPacket {
            id,
            tos,
            size_bytes,
            ingress: 0,
            enqueue_seq: 0,
            message: id,
            flow: 0,
            hop: 0,
            enqueued_at_ns: 0,
            lower_band_wait_ns: 0,
        }
    }

    pub fn band(&self) -> Band {
        tos_to_band(self.tos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Accepted(Band),
    Dropped(Band),
}

/// Three FIFO bands served in strict priority: band `j` is only dequeued
/// when every band `i < j` is empty.
#[derive(Debug, Clone)]
pub struct BandQueue {
    bands: [VecDeque<EmuPacket>; Band::COUNT],
    capacity: [usize; Band::COUNT],
    drops: [u64; Band::COUNT],
    next_seq: u64,
}

impl Default for BandQueue {
    fn default() -> Self {
        BandQueue::new(DEFAULT_BAND_CAPACITY)
    }
}

impl BandQueue {
    pub fn new(capacity_per_band: usize) -> Self {
        Self::with_capacities([capacity_per_band; Band::COUNT])
    }

    pub fn with_capacities(capacity: [usize; Band::COUNT]) -> Self {
        BandQueue {
            bands: Default::default(),
            capacity,
            drops: [0; Band::COUNT],
            next_seq: 0,
        }
    }

    pub fn enqueue(&mut self, mut p: EmuPacket) -> Admission {
        let band = p.band();
        let i = band.index();
        if self.bands[i].len() >= self.capacity[i] {
            self.drops[i] += 1;
            return Admission::Dropped(band);
        }
        p.enqueue_seq = self.next_seq;
        self.next_seq += 1;
        self.bands[i].push_back(p);
        Admission::Accepted(band)
    }

    pub fn dequeue(&mut self) -> Option<EmuPacket> {
        self.bands.iter_mut().find_map(VecDeque::pop_front)
    }

    pub fn peek(&self) -> Option<&EmuPacket> {
        self.bands.iter().find_map(VecDeque::front)
    }

    pub fn has_room(&self, band: Band) -> bool {
        self.bands[band.index()].len() < self.capacity[band.index()]
    }

    pub fn len(&self) -> usize {
        self.bands.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.iter().all(VecDeque::is_empty)
    }

    pub fn band_len(&self, band: Band) -> usize {
        self.bands[band.index()].len()
    }

    pub fn capacity(&self, band: Band) -> usize {
        self.capacity[band.index()]
    }

    pub fn drops(&self, band: Band) -> u64 {
        self.drops[band.index()]
    }

    pub fn total_drops(&self) -> u64 {
        self.drops.iter().sum()
    }

    /// Packets resident in bands strictly higher in priority than `band`.
    pub(crate) fn higher_than_mut(&mut self, band: Band) -> impl Iterator<Item = &mut EmuPacket> {
        self.bands[..band.index()]
            .iter_mut()
            .flat_map(|b| b.iter_mut())
    }
}
