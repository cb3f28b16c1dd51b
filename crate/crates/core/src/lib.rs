//! Publish/subscribe ports with per-channel priority: thread scheduling and
//! DSCP packet marking, adjustable at runtime through admin commands.

pub mod bench;
pub mod clock;
pub mod nameserver;
pub mod netemu;
pub mod port;
pub mod qos;
pub mod wire;

pub use nameserver::{EndpointTriplet, NameClient, NameServer, PortName};
pub use port::{AdminClient, ChannelInfo, Port, PortConfig, PortError};
pub use qos::{PriorityClass, SchedPolicy, SchedRequest, SchedulingProperties};
pub use wire::{CarrierId, Frame, FrameType};
