//! Deterministic emulation of NIC and switch congestion points.

mod band_queue;
pub mod config;
mod network;
mod topology;
pub mod trace;

pub use band_queue::{Admission, BandQueue, EmuPacket, DEFAULT_BAND_CAPACITY};
pub use network::{EmuFlowHandle, EmuNetwork, EmuReceiver, EmuRecvError, EmuSendError};
pub use topology::{
    serialization_ns, Delivery, EmuTopology, FlowId, FlowSpec, LinkSpec, LinkStats, Loss, NodeKind,
    TopologyError, TraceRecord, TransportProfile, DEFAULT_MTU, GIGABIT_BYTES_PER_SEC,
};
