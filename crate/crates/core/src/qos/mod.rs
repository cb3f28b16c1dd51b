//! Channel priority: packet marking (DSCP in the TOS byte, classified into
//! three strict-priority bands) and scheduling of the dedicated channel
//! threads. Both are changed at runtime through [`admin`] commands.

pub mod admin;
mod sched;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use sched::{
    current_thread, OsScheduler, RefusingScheduler, SchedRefusal, ThreadHandle, ThreadScheduler,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QosError {
    #[error("dscp out of range: {0} (0..=63)")]
    DscpOutOfRange(u32),
    #[error("invalid-priority-for-policy: {priority} for {policy}")]
    InvalidPriorityForPolicy { policy: SchedPolicy, priority: i32 },
    #[error("unknown priority class {0:?}")]
    UnknownClass(String),
    #[error("unknown dscp name {0:?}")]
    UnknownDscpName(String),
    #[error("unknown scheduling policy {0:?}")]
    UnknownPolicy(String),
}

/// The four predefined packet priority classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum PriorityClass {
    Low,
    #[default]
    Normal,
    High,
    Critical,
}

impl PriorityClass {
    pub const ALL: [PriorityClass; 4] = [
        PriorityClass::Low,
        PriorityClass::Normal,
        PriorityClass::High,
        PriorityClass::Critical,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            PriorityClass::Low => "LOW",
            PriorityClass::Normal => "NORMAL",
            PriorityClass::High => "HIGH",
            PriorityClass::Critical => "CRITICAL",
        }
    }

    pub fn dscp(self) -> DscpCodepoint {
        class_to_dscp(self)
    }

    pub fn tos(self) -> u8 {
        dscp_to_tos(self.dscp())
    }

    /// The class whose codepoint is `d`, if any.
    pub fn from_dscp(d: DscpCodepoint) -> Option<PriorityClass> {
        Self::ALL.into_iter().find(|c| c.dscp() == d)
    }
}

impl fmt::Display for PriorityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for PriorityClass {
    type Err = QosError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.keyword().eq_ignore_ascii_case(s))
            .ok_or_else(|| QosError::UnknownClass(s.to_string()))
    }
}

/// A 6-bit differentiated services codepoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct DscpCodepoint(u8);

impl DscpCodepoint {
    pub const DEFAULT: DscpCodepoint = DscpCodepoint(0);
    /// Assured forwarding class 1, low drop precedence (001010).
    pub const AF11: DscpCodepoint = DscpCodepoint(10);
    /// Assured forwarding class 4, medium drop precedence (100100).
    pub const AF42: DscpCodepoint = DscpCodepoint(36);
    /// Voice admit (101100).
    pub const VA: DscpCodepoint = DscpCodepoint(44);
    /// Expedited forwarding (101110).
    pub const EF: DscpCodepoint = DscpCodepoint(46);

    pub fn new(value: u32) -> Result<Self, QosError> {
        if value > 63 {
            return Err(QosError::DscpOutOfRange(value));
        }
        Ok(DscpCodepoint(value as u8))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Codepoint held in the upper six bits of a TOS byte.
    pub fn from_tos(tos: u8) -> Self {
        DscpCodepoint(tos >> 2)
    }

    /// Standard mnemonic for well-known codepoints (Default, CSx, AFxy, VA, EF).
    pub fn mnemonic(self) -> Option<String> {
        let v = self.0;
        match v {
            0 => Some("Default".into()),
            44 => Some("VA".into()),
            46 => Some("EF".into()),
            _ if v.is_multiple_of(8) => Some(format!("CS{}", v / 8)),
            _ => {
                let (class, drop) = (v >> 3, (v >> 1) & 0b11);
                (v & 1 == 0 && (1..=4).contains(&class) && (1..=3).contains(&drop))
                    .then(|| format!("AF{class}{drop}"))
            }
        }
    }

    pub fn from_mnemonic(s: &str) -> Result<Self, QosError> {
        let err = || QosError::UnknownDscpName(s.to_string());
        let upper = s.to_ascii_uppercase();
        let v = match upper.as_str() {
            "DEFAULT" | "BE" => 0,
            "VA" => 44,
            "EF" => 46,
            _ => {
                if let Some(n) = upper.strip_prefix("CS") {
                    let n: u8 = n.parse().map_err(|_| err())?;
                    if n > 7 {
                        return Err(err());
                    }
                    n * 8
                } else if let Some(xy) = upper.strip_prefix("AF") {
                    let b = xy.as_bytes();
                    if b.len() != 2
                        || !(b'1'..=b'4').contains(&b[0])
                        || !(b'1'..=b'3').contains(&b[1])
                    {
                        return Err(err());
                    }
                    ((b[0] - b'0') << 3) | ((b[1] - b'0') << 1)
                } else {
                    return Err(err());
                }
            }
        };
        Ok(DscpCodepoint(v))
    }
}

impl fmt::Display for DscpCodepoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mnemonic() {
            Some(m) => f.write_str(&m),
            None => write!(f, "{}", self.0),
        }
    }
}

/// Queue band of a three-band strict-priority discipline; 0 is served first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Band(u8);

impl Band {
    pub const COUNT: usize = 3;
    pub const HIGH: Band = Band(0);
    pub const DEFAULT: Band = Band(1);
    pub const LOW: Band = Band(2);

    pub fn new(index: usize) -> Option<Band> {
        (index < Self::COUNT).then_some(Band(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn class_to_dscp(c: PriorityClass) -> DscpCodepoint {
    match c {
        PriorityClass::Low => DscpCodepoint::AF11,
        PriorityClass::Normal => DscpCodepoint::DEFAULT,
        PriorityClass::High => DscpCodepoint::AF42,
        PriorityClass::Critical => DscpCodepoint::VA,
    }
}

/// Places the codepoint in the six most significant bits; the two ECN bits
/// are left clear.
pub fn dscp_to_tos(d: DscpCodepoint) -> u8 {
    d.0 << 2
}

/// Range-checked variant of [`dscp_to_tos`] for raw integers.
pub fn dscp_value_to_tos(value: u32) -> Result<u8, QosError> {
    DscpCodepoint::new(value).map(dscp_to_tos)
}

/// Band assignment for the predefined classes' codepoints. Any other
/// codepoint lands in the default band. ECN bits are ignored.
pub fn tos_to_band(tos: u8) -> Band {
    match DscpCodepoint::from_tos(tos) {
        DscpCodepoint::AF42 | DscpCodepoint::VA => Band::HIGH,
        DscpCodepoint::AF11 => Band::LOW,
        _ => Band::DEFAULT,
    }
}

// --- thread scheduling ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SchedPolicy {
    /// Default time-sharing.
    #[default]
    Other,
    /// Real-time first-in-first-out.
    Fifo,
    /// Real-time round-robin.
    RoundRobin,
}

impl SchedPolicy {
    pub fn keyword(self) -> &'static str {
        match self {
            SchedPolicy::Other => "SCHED_OTHER",
            SchedPolicy::Fifo => "SCHED_FIFO",
            SchedPolicy::RoundRobin => "SCHED_RR",
        }
    }

    pub fn is_realtime(self) -> bool {
        !matches!(self, SchedPolicy::Other)
    }
}

impl fmt::Display for SchedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for SchedPolicy {
    type Err = QosError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "SCHED_OTHER" | "OTHER" => Ok(SchedPolicy::Other),
            "SCHED_FIFO" | "FIFO" => Ok(SchedPolicy::Fifo),
            "SCHED_RR" | "RR" => Ok(SchedPolicy::RoundRobin),
            _ => Err(QosError::UnknownPolicy(s.to_string())),
        }
    }
}

/// A validated policy/priority pair as requested by an administrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SchedRequest {
    policy: SchedPolicy,
    priority: i32,
}

impl SchedRequest {
    /// Priority must be 0 for `Other` and 1..=99 for the real-time policies.
    pub fn new(policy: SchedPolicy, priority: i32) -> Result<Self, QosError> {
        let ok = if policy.is_realtime() {
            (1..=99).contains(&priority)
        } else {
            priority == 0
        };
        if !ok {
            return Err(QosError::InvalidPriorityForPolicy { policy, priority });
        }
        Ok(SchedRequest { policy, priority })
    }

    pub fn policy(&self) -> SchedPolicy {
        self.policy
    }

    pub fn priority(&self) -> i32 {
        self.priority
    }

    /// Total order used wherever several channel threads compete: any
    /// real-time thread outranks every time-sharing one, higher real-time
    /// priority outranks lower.
    pub fn rank(&self) -> i32 {
        if self.policy.is_realtime() {
            100 + self.priority
        } else {
            0
        }
    }
}

/// Scheduling state of one channel thread, including whether the OS honoured it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulingProperties {
    pub policy: SchedPolicy,
    pub priority: i32,
    pub applied: bool,
    pub degraded_reason: Option<String>,
}

impl Default for SchedulingProperties {
    fn default() -> Self {
        SchedulingProperties {
            policy: SchedPolicy::Other,
            priority: 0,
            applied: true,
            degraded_reason: None,
        }
    }
}

impl SchedulingProperties {
    pub fn request(&self) -> SchedRequest {
        SchedRequest {
            policy: self.policy,
            priority: self.priority,
        }
    }

    pub fn from_outcome(req: SchedRequest, outcome: Result<(), SchedRefusal>) -> Self {
        SchedulingProperties {
            policy: req.policy,
            priority: req.priority,
            applied: outcome.is_ok(),
            degraded_reason: outcome.err().map(|r| r.reason),
        }
    }
}
