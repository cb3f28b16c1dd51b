//! Declarative topology and traffic files.
//!
//! ```text
//! # two hosts behind a switch
//! host h1
//! host h2
//! switch sw
//! link h1 sw rate=1Gbit delay=5us queue=1000
//! link h2 sw
//! flow probe h1 h2 class=HIGH size=1KiB period=10ms count=100 priority=30 carrier=udp
//! flow bulk  h1 h2 tos=0x00 size=16KiB period=200us count=5000 start=1ms
//! ```
//!
//! Rates accept `bit`, `kbit`, `Mbit`, `Gbit` (bits per second) and `B/s`,
//! `kB/s`, `MB/s`, `GB/s`. Times accept `ns`, `us`, `ms`, `s`. Sizes accept
//! `B`, `KiB`, `MiB`, `kB`, `MB`. Bare numbers are bytes/s, ns and bytes.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use super::topology::{
    Delivery, EmuTopology, FlowId, FlowSpec, LinkSpec, TopologyError, TransportProfile,
};
use crate::qos::{DscpCodepoint, PriorityClass, SchedPolicy, SchedRequest};
use crate::wire::CarrierId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkDecl {
    pub a: String,
    pub b: String,
    pub spec: LinkSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficDecl {
    pub name: String,
    pub src: String,
    pub dst: String,
    pub tos: u8,
    pub size_bytes: u32,
    pub period_ns: u64,
    pub count: u64,
    pub start_ns: u64,
    pub sched: SchedRequest,
    pub carrier: CarrierId,
}

impl TrafficDecl {
    pub fn flow_spec(&self) -> FlowSpec {
        FlowSpec::new(&self.src, &self.dst)
            .tos(self.tos)
            .thread_rank(self.sched.rank())
            .profile(profile_for(self.carrier))
    }
}

/// Per-packet framing the emulator applies to a carrier.
pub fn profile_for(carrier: CarrierId) -> TransportProfile {
    match carrier {
        CarrierId::Tcp => TransportProfile::tcp(),
        CarrierId::Udp => TransportProfile::udp(),
        CarrierId::Emu => TransportProfile::raw(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TopologyConfig {
    pub hosts: Vec<String>,
    pub switches: Vec<String>,
    pub links: Vec<LinkDecl>,
    pub traffic: Vec<TrafficDecl>,
}

/// Outcome of one traffic declaration after a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSummary {
    pub name: String,
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub mean_latency_ns: f64,
    pub max_latency_ns: u64,
}

impl TopologyConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = TopologyConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ConfigError::Syntax { line, message };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut words = content.split_whitespace();
            let kind = words.next().unwrap();
            let positional: Vec<&str> = words.clone().take_while(|w| !w.contains('=')).collect();
            let opts = parse_options(words.skip(positional.len())).map_err(err)?;
            let take = |n: usize, what: &str| -> Result<Vec<String>, ConfigError> {
                if positional.len() != n {
                    return Err(ConfigError::Syntax {
                        line,
                        message: format!("{kind} expects {what}"),
                    });
                }
                Ok(positional.iter().map(|s| s.to_string()).collect())
            };
            match kind {
                "host" => cfg.hosts.extend(take(1, "a name")?),
                "switch" => cfg.switches.extend(take(1, "a name")?),
                "link" => {
                    let p = take(2, "two endpoints")?;
                    cfg.links.push(LinkDecl {
                        a: p[0].clone(),
                        b: p[1].clone(),
                        spec: link_spec(&opts).map_err(err)?,
                    });
                }
                "flow" => {
                    let p = take(3, "name, source and destination")?;
                    cfg.traffic.push(traffic(&p, &opts).map_err(err)?);
                }
                other => return Err(err(format!("unknown declaration '{other}'"))),
            }
        }
        Ok(cfg)
    }

    /// Builds the topology; traffic flows are returned in declaration order.
    pub fn build(&self) -> Result<(EmuTopology, Vec<FlowId>), TopologyError> {
        let mut t = EmuTopology::new();
        for h in &self.hosts {
            t.add_host(h)?;
        }
        for s in &self.switches {
            t.add_switch(s)?;
        }
        for l in &self.links {
            t.add_link(&l.a, &l.b, l.spec)?;
        }
        let flows = self
            .traffic
            .iter()
            .map(|d| t.add_flow(d.flow_spec()))
            .collect::<Result<_, _>>()?;
        Ok((t, flows))
    }

    /// Submits every declared message and runs the topology to completion.
    pub fn run(&self, trace: bool) -> Result<(EmuTopology, Vec<FlowSummary>), TopologyError> {
        let (mut t, flows) = self.build()?;
        if trace {
            t.enable_trace();
        }
        for (d, &f) in self.traffic.iter().zip(&flows) {
            for k in 0..d.count {
                t.submit_at(d.start_ns + k * d.period_ns, f, d.size_bytes, k, None);
            }
        }
        let delivered = t.run_to_completion();
        let losses = t.take_losses();
        let mut by_flow: BTreeMap<FlowId, Vec<&Delivery>> = BTreeMap::new();
        for d in &delivered {
            by_flow.entry(d.flow).or_default().push(d);
        }
        let summaries = self
            .traffic
            .iter()
            .zip(&flows)
            .map(|(decl, f)| {
                let ds = by_flow.get(f).map(Vec::as_slice).unwrap_or_default();
                let lat: Vec<u64> = ds.iter().map(|d| d.delivered_ns - d.submit_ns).collect();
                FlowSummary {
                    name: decl.name.clone(),
                    sent: decl.count,
                    delivered: ds.len() as u64,
                    lost: losses.iter().filter(|l| l.flow == *f).count() as u64,
                    mean_latency_ns: if lat.is_empty() {
                        0.0
                    } else {
                        lat.iter().sum::<u64>() as f64 / lat.len() as f64
                    },
                    max_latency_ns: lat.iter().copied().max().unwrap_or(0),
                }
            })
            .collect();
        Ok((t, summaries))
    }
}

impl FromStr for TopologyConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopologyConfig::parse(s)
    }
}

fn parse_options<'a>(
    words: impl Iterator<Item = &'a str>,
) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got '{w}'"))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("duplicate option '{k}'"));
        }
    }
    Ok(out)
}

fn link_spec(opts: &BTreeMap<String, String>) -> Result<LinkSpec, String> {
    let mut spec = LinkSpec::default();
    for (k, v) in opts {
        match k.as_str() {
            "rate" => spec.rate_bytes_per_sec = parse_rate(v)?,
            "delay" => spec.propagation_delay_ns = parse_duration_ns(v)?,
            "queue" => spec.queue_capacity = v.parse().map_err(|_| format!("bad queue '{v}'"))?,
            other => return Err(format!("unknown link option '{other}'")),
        }
    }
    if spec.rate_bytes_per_sec == 0 || spec.queue_capacity == 0 {
        return Err("rate and queue must be positive".into());
    }
    Ok(spec)
}

fn traffic(p: &[String], opts: &BTreeMap<String, String>) -> Result<TrafficDecl, String> {
    let mut d = TrafficDecl {
        name: p[0].clone(),
        src: p[1].clone(),
        dst: p[2].clone(),
        tos: 0,
        size_bytes: 1024,
        period_ns: 1_000_000,
        count: 1,
        start_ns: 0,
        sched: SchedRequest::default(),
        carrier: CarrierId::Emu,
    };
    for (k, v) in opts {
        match k.as_str() {
            "tos" => {
                d.tos = parse_int(v)
                    .and_then(|n| u8::try_from(n).ok())
                    .ok_or(format!("bad tos '{v}'"))?
            }
            "dscp" => {
                let code = DscpCodepoint::from_mnemonic(v)
                    .or_else(|_| {
                        DscpCodepoint::new(
                            parse_int(v).unwrap_or(u64::MAX).min(u32::MAX as u64) as u32
                        )
                    })
                    .map_err(|e| e.to_string())?;
                d.tos = code.value() << 2;
            }
            "class" => d.tos = v.parse::<PriorityClass>().map_err(|e| e.to_string())?.tos(),
            "size" => {
                d.size_bytes =
                    u32::try_from(parse_size(v)?).map_err(|_| format!("size too large '{v}'"))?
            }
            "period" => d.period_ns = parse_duration_ns(v)?,
            "count" => d.count = v.parse().map_err(|_| format!("bad count '{v}'"))?,
            "start" => d.start_ns = parse_duration_ns(v)?,
            "priority" => {
                let n: i32 = v.parse().map_err(|_| format!("bad priority '{v}'"))?;
                let policy = if n == 0 {
                    SchedPolicy::Other
                } else {
                    SchedPolicy::Fifo
                };
                d.sched = SchedRequest::new(policy, n).map_err(|e| e.to_string())?;
            }
            "carrier" => {
                d.carrier = v
                    .parse()
                    .map_err(|e: crate::wire::UnknownCarrier| e.to_string())?
            }
            other => return Err(format!("unknown flow option '{other}'")),
        }
    }
    Ok(d)
}

fn parse_int(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

fn split_unit(s: &str) -> (&str, &str) {
    let i = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    (&s[..i], &s[i..])
}

fn scaled(s: &str, table: &[(&str, f64)]) -> Result<u64, String> {
    let (num, unit) = split_unit(s);
    let n: f64 = num.parse().map_err(|_| format!("bad number '{s}'"))?;
    let factor = table
        .iter()
        .find(|(u, _)| *u == unit)
        .map(|(_, f)| *f)
        .ok_or_else(|| format!("unknown unit in '{s}'"))?;
    Ok((n * factor).round() as u64)
}

/// Bytes per second.
pub fn parse_rate(s: &str) -> Result<u64, String> {
    scaled(
        s,
        &[
            ("", 1.0),
            ("B/s", 1.0),
            ("kB/s", 1e3),
            ("MB/s", 1e6),
            ("GB/s", 1e9),
            ("bit", 0.125),
            ("kbit", 125.0),
            ("Mbit", 125e3),
            ("Gbit", 125e6),
        ],
    )
}

pub fn parse_duration_ns(s: &str) -> Result<u64, String> {
    scaled(
        s,
        &[("", 1.0), ("ns", 1.0), ("us", 1e3), ("ms", 1e6), ("s", 1e9)],
    )
}

pub fn parse_size(s: &str) -> Result<u64, String> {
    scaled(
        s,
        &[
            ("", 1.0),
            ("B", 1.0),
            ("kB", 1e3),
            ("KiB", 1024.0),
            ("MB", 1e6),
            ("MiB", 1024.0 * 1024.0),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
        host h1   # sender
        host h2
        switch sw
        link h1 sw rate=1Gbit delay=5us
        link h2 sw rate=1MB/s queue=10
        flow probe h1 h2 class=HIGH size=1KiB period=10ms count=3 priority=30
        flow bulk h1 h2 tos=0x28 size=100 count=2 carrier=udp
    ";

    #[test]
    fn parses_sample() {
        let c = TopologyConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.hosts, vec!["h1", "h2"]);
        assert_eq!(c.links[0].spec.rate_bytes_per_sec, 125_000_000);
        assert_eq!(c.links[0].spec.propagation_delay_ns, 5_000);
        assert_eq!(c.links[1].spec.queue_capacity, 10);
        let p = &c.traffic[0];
        assert_eq!(
            (p.tos, p.size_bytes, p.period_ns, p.count),
            (0x90, 1024, 10_000_000, 3)
        );
        assert_eq!(p.sched.rank(), 130);
        assert_eq!(c.traffic[1].carrier, CarrierId::Udp);
    }

    #[test]
    fn runs_sample() {
        let c = TopologyConfig::parse(SAMPLE).unwrap();
        let (_, s) = c.run(false).unwrap();
        assert_eq!(s[0].delivered, 3);
        assert_eq!(s[1].delivered, 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = TopologyConfig::parse("host a\nlink a\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 2, .. }));
        let e = TopologyConfig::parse("host a\nflow f a b rate=3\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 2, .. }));
    }

    #[test]
    fn units() {
        assert_eq!(parse_rate("8bit"), Ok(1));
        assert_eq!(parse_duration_ns("1.5ms"), Ok(1_500_000));
        assert_eq!(parse_size("2MiB"), Ok(2 * 1024 * 1024));
        assert!(parse_size("3parsecs").is_err());
    }
}
