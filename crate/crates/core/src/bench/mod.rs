//! Round-trip latency benchmarks: an acknowledged probe channel measured
//! while a second channel loads the network.

mod emulated;
mod live;
pub mod report;
mod stats;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::netemu::config::profile_for;
use crate::netemu::{LinkSpec, TopologyError, TransportProfile};
use crate::port::PortError;
use crate::wire::{CarrierId, HEADER_LEN};

pub use emulated::{
    measurement_sched, run_load_emulated, run_rtt_probe_emulated, run_scenario_emulated,
    run_scenario_emulated_in, scenario_topology,
};
pub use live::{run_load, run_rtt_probe, run_scenario_live, LiveOptions};
pub use report::{BenchReport, BenchRow};
pub use stats::{summarize, summarize_values, RttSample, Summary};

pub const DEFAULT_WARMUP: usize = 100;
pub const DEFAULT_PROBE_COUNT: usize = 500;
pub const DEFAULT_PROBE_RATE_HZ: f64 = 100.0;
pub const NIC_PROBE_BYTES: u32 = 1024;
pub const SWITCH_PROBE_BYTES: u32 = 32 * 1024;
pub const DEFAULT_LOAD_MESSAGE_BYTES: u32 = 16 * 1024;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("empty-sample-set")]
    EmptySampleSet,
    #[error("zero-acks")]
    ZeroAcks,
    #[error("channel-down: {0}")]
    ChannelDown(String),
    #[error("load fraction {0} outside (0, 1]")]
    InvalidLoadFraction(f64),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Port(#[from] PortError),
}

/// Measurement channel traffic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSpec {
    pub size_bytes: u32,
    pub rate_hz: f64,
    pub count: usize,
    pub warmup: usize,
}

impl ProbeSpec {
    pub fn new(size_bytes: u32) -> Self {
        ProbeSpec {
            size_bytes,
            rate_hz: DEFAULT_PROBE_RATE_HZ,
            count: DEFAULT_PROBE_COUNT,
            warmup: DEFAULT_WARMUP,
        }
    }

    pub fn total(&self) -> usize {
        self.warmup + self.count
    }

    pub fn period_ns(&self) -> f64 {
        1e9 / self.rate_hz
    }

    fn validate(&self) -> Result<(), BenchError> {
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return Err(BenchError::InvalidProbe(format!(
                "rate {} Hz",
                self.rate_hz
            )));
        }
        Ok(())
    }
}

/// Background traffic as a fraction of the link bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadSpec {
    fraction: f64,
    pub message_size_bytes: u32,
    pub carrier: CarrierId,
}

impl LoadSpec {
    pub fn new(
        fraction: f64,
        message_size_bytes: u32,
        carrier: CarrierId,
    ) -> Result<Self, BenchError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(BenchError::InvalidLoadFraction(fraction));
        }
        Ok(LoadSpec {
            fraction,
            message_size_bytes,
            carrier,
        })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn profile(&self) -> TransportProfile {
        profile_for(self.carrier)
    }

    /// Bytes one load message puts on the wire, frame and packet headers included.
    pub fn wire_bytes_per_message(&self) -> u64 {
        self.profile()
            .wire_bytes(self.message_size_bytes + HEADER_LEN as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub target_bytes_per_sec: f64,
    pub achieved_bytes_per_sec: f64,
    pub messages: u64,
    pub duration_ns: u64,
    /// Achieved rate in each whole one-second window.
    pub window_rates: Vec<f64>,
}

impl LoadReport {
    pub fn achieved_fraction_of_target(&self) -> f64 {
        self.achieved_bytes_per_sec / self.target_bytes_per_sec
    }

    pub fn cannot_sustain(&self) -> bool {
        self.duration_ns > 0 && self.achieved_fraction_of_target() < 0.9
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    /// Acknowledged probes after warmup, in send order.
    pub samples: Vec<RttSample>,
    /// Probes after warmup whose ACK never arrived.
    pub drops: u64,
    pub duplicates: u64,
    /// Emulated runs only: worst per-hop wait of a probe behind a lower-band packet.
    pub max_lower_band_wait_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    /// Probe and load publishers share one host's NIC.
    NicCongestion,
    /// Probe and load publishers on separate hosts, subscribers behind one switch port.
    SwitchCongestion,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::NicCongestion, Scenario::SwitchCongestion];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::NicCongestion => "nic",
            Scenario::SwitchCongestion => "switch",
        }
    }

    pub fn default_probe_bytes(self) -> u32 {
        match self {
            Scenario::NicCongestion => NIC_PROBE_BYTES,
            Scenario::SwitchCongestion => SWITCH_PROBE_BYTES,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nic" | "nic_congestion" => Ok(Scenario::NicCongestion),
            "switch" | "switch_congestion" => Ok(Scenario::SwitchCongestion),
            other => Err(format!(
                "unknown scenario {other:?} (expected nic or switch)"
            )),
        }
    }
}

/// One benchmark configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub qos: bool,
    /// 0 runs without load.
    pub load_fraction: f64,
    pub probe_carrier: CarrierId,
    pub load_carrier: CarrierId,
    pub probe: ProbeSpec,
    pub load_message_bytes: u32,
    pub link: LinkSpec,
    /// Seeds the probe send-time jitter.
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(
        scenario: Scenario,
        qos: bool,
        load_fraction: f64,
        probe_carrier: CarrierId,
        load_carrier: CarrierId,
    ) -> Self {
        ScenarioConfig {
            scenario,
            qos,
            load_fraction,
            probe_carrier,
            load_carrier,
            probe: ProbeSpec::new(scenario.default_probe_bytes()),
            load_message_bytes: DEFAULT_LOAD_MESSAGE_BYTES,
            link: LinkSpec::default(),
            seed: DEFAULT_SEED,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if !(0.0..=1.0).contains(&self.load_fraction) {
            return Err(BenchError::InvalidLoadFraction(self.load_fraction));
        }
        self.probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub summary: Summary,
    pub drops: u64,
    pub duplicates: u64,
    pub max_lower_band_wait_ns: u64,
    pub load: Option<LoadReport>,
}
