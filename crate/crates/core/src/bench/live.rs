//! Benchmarks over running ports. Timing is wall-clock, so results depend on
//! the host.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::emulated::{measurement_sched, placement, scenario_topology};
use super::{
    summarize, BenchError, LoadReport, LoadSpec, ProbeOutcome, ProbeSpec, RttSample,
    ScenarioConfig, ScenarioResult,
};
use crate::nameserver::{NameServer, PortName};
use crate::netemu::EmuNetwork;
use crate::port::{
    AdminClient, ChannelStatus, EnqueueOutcome, Message, Port, PortConfig, PortError,
};
use crate::qos::{OsScheduler, PriorityClass, ThreadScheduler};
use crate::wire::CarrierId;

#[derive(Debug, Clone)]
pub struct LiveOptions {
    pub scheduler: Arc<dyn ThreadScheduler>,
    /// How long to wait for outstanding ACKs after the last probe.
    pub ack_timeout: Duration,
}

impl Default for LiveOptions {
    fn default() -> Self {
        LiveOptions {
            scheduler: Arc::new(OsScheduler),
            ack_timeout: Duration::from_secs(2),
        }
    }
}

fn channel_down(port: &Port, peer: &PortName) -> Result<(), BenchError> {
    match port.output_info(peer) {
        Ok(info) if info.status == ChannelStatus::Closed => {
            Err(BenchError::ChannelDown(peer.to_string()))
        }
        Ok(_) => Ok(()),
        Err(PortError::NoSuchChannel) => Err(BenchError::ChannelDown(peer.to_string())),
        Err(e) => Err(e.into()),
    }
}

/// Sends `warmup + count` acknowledged probes to `peer` at the probe rate and
/// collects the round trips of the counted ones.
pub fn run_rtt_probe(
    port: &Port,
    peer: &PortName,
    probe: &ProbeSpec,
    ack_timeout: Duration,
) -> Result<ProbeOutcome, BenchError> {
    probe.validate()?;
    channel_down(port, peer)?;
    port.take_acks(peer)?;
    let period = Duration::from_secs_f64(1.0 / probe.rate_hz);
    let mut ids = Vec::with_capacity(probe.total());
    let mut acks: HashMap<u64, RttSample> = HashMap::new();
    let mut duplicates = 0u64;
    let mut record = |a: crate::port::AckRecord, acks: &mut HashMap<u64, RttSample>| {
        let s = RttSample {
            message_id: a.message_id,
            send_ns: a.send_ns,
            ack_ns: a.ack_ns,
        };
        if acks.insert(a.message_id, s).is_some() {
            duplicates += 1;
        }
    };
    let start = Instant::now();
    for i in 0..probe.total() {
        let due = start + period * i as u32;
        loop {
            let now = Instant::now();
            if now >= due {
                break;
            }
            if let Some(a) = port.recv_ack(peer, due - now)? {
                record(a, &mut acks);
            }
        }
        let (id, outcome) = port.publish_to(
            peer,
            Message::new(vec![0u8; probe.size_bytes as usize]),
            true,
        )?;
        if outcome == EnqueueOutcome::Rejected {
            return Err(BenchError::InvalidProbe(format!(
                "{} bytes exceed the carrier limit",
                probe.size_bytes
            )));
        }
        ids.push(id);
        channel_down(port, peer)?;
    }
    let counted = &ids[probe.warmup..];
    let deadline = Instant::now() + ack_timeout;
    while counted.iter().any(|id| !acks.contains_key(id)) {
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        if let Some(a) = port.recv_ack(peer, deadline - now)? {
            record(a, &mut acks);
        }
    }
    let mut samples = Vec::new();
    let mut drops = 0;
    for id in counted {
        match acks.get(id) {
            Some(s) => samples.push(*s),
            None => drops += 1,
        }
    }
    if probe.count > 0 && samples.is_empty() {
        return Err(BenchError::ZeroAcks);
    }
    Ok(ProbeOutcome {
        samples,
        drops,
        duplicates,
        max_lower_band_wait_ns: 0,
    })
}

fn pace_load(
    port: &Port,
    peer: &PortName,
    spec: &LoadSpec,
    link_rate_bytes_per_sec: u64,
    duration: Duration,
    stop: &AtomicBool,
) -> Result<LoadReport, BenchError> {
    channel_down(port, peer)?;
    let wire = spec.wire_bytes_per_message();
    let target = spec.fraction() * link_rate_bytes_per_sec as f64;
    let period = Duration::from_secs_f64(wire as f64 / target);
    let sent_at_start = port.output_info(peer)?.counters.sent;
    let payload = bytes::Bytes::from(vec![0u8; spec.message_size_bytes as usize]);
    let start = Instant::now();
    let mut published: u64 = 0;
    let mut window_rates = Vec::new();
    let mut window_start_sent = sent_at_start;
    let mut next_window = start + Duration::from_secs(1);
    loop {
        let now = Instant::now();
        let elapsed = now - start;
        if elapsed >= duration || stop.load(Ordering::Relaxed) {
            break;
        }
        if now >= next_window {
            let sent = port.output_info(peer)?.counters.sent;
            window_rates.push((sent - window_start_sent) as f64 * wire as f64);
            window_start_sent = sent;
            next_window += Duration::from_secs(1);
        }
        let due = (elapsed.as_secs_f64() / period.as_secs_f64()) as u64 + 1;
        while published < due {
            port.publish_to(peer, Message::new(payload.clone()), false)?;
            published += 1;
        }
        thread::sleep(period.min(Duration::from_millis(1)));
    }
    let elapsed = start.elapsed();
    let sent = port.output_info(peer)?.counters.sent - sent_at_start;
    Ok(LoadReport {
        target_bytes_per_sec: target,
        achieved_bytes_per_sec: if elapsed.is_zero() {
            0.0
        } else {
            sent as f64 * wire as f64 / elapsed.as_secs_f64()
        },
        messages: sent,
        duration_ns: elapsed.as_nanos() as u64,
        window_rates,
    })
}

/// Publishes load to `peer` at `fraction × link rate` for `duration`.
pub fn run_load(
    port: &Port,
    peer: &PortName,
    spec: &LoadSpec,
    link_rate_bytes_per_sec: u64,
    duration: Duration,
) -> Result<LoadReport, BenchError> {
    if duration.is_zero() {
        return Ok(LoadReport {
            target_bytes_per_sec: spec.fraction() * link_rate_bytes_per_sec as f64,
            achieved_bytes_per_sec: 0.0,
            messages: 0,
            duration_ns: 0,
            window_rates: Vec::new(),
        });
    }
    pace_load(
        port,
        peer,
        spec,
        link_rate_bytes_per_sec,
        duration,
        &AtomicBool::new(false),
    )
}

fn name(s: &str) -> PortName {
    PortName::new(s).expect("static port name")
}

/// Keeps a subscriber's inbox empty until `stop` is set.
fn drain(port: Arc<Port>, stop: Arc<AtomicBool>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            let _ = port.read(true, Some(Duration::from_millis(50)));
        }
    })
}

/// Runs one configuration with real ports: four ports on loopback (or on a
/// wall-clocked emulated network for the emu carrier), QoS applied through
/// an admin session.
pub fn run_scenario_live(
    cfg: &ScenarioConfig,
    opts: &LiveOptions,
) -> Result<ScenarioResult, BenchError> {
    cfg.validate()?;
    let ns = NameServer::start("127.0.0.1:0".parse().expect("literal address"))
        .map_err(|e| PortError::Bind(e.to_string()))?;
    let uses_emu = cfg.probe_carrier == CarrierId::Emu || cfg.load_carrier == CarrierId::Emu;
    let net = if uses_emu {
        Some(EmuNetwork::new(scenario_topology(cfg.link)?))
    } else {
        None
    };
    let place = placement(cfg.scenario);
    let open = |n: &str, host: &str| -> Result<Port, BenchError> {
        let mut c = PortConfig::default()
            .with_nameserver(ns.local_addr())
            .with_scheduler(Arc::clone(&opts.scheduler));
        if let Some(net) = &net {
            c = c.with_emu(net.clone(), host);
        }
        Ok(Port::open(name(n), c)?)
    };
    let (pub1_name, pub2_name, sub1_name, sub2_name) =
        (name("/pub1"), name("/pub2"), name("/sub1"), name("/sub2"));
    let pub1 = open("/pub1", place.probe_src)?;
    let pub2 = Arc::new(open("/pub2", place.load_src)?);
    let sub1 = Arc::new(open("/sub1", place.probe_dst)?);
    let sub2 = Arc::new(open("/sub2", place.load_dst)?);
    pub1.connect(&sub1_name, cfg.probe_carrier)?;
    pub2.connect(&sub2_name, cfg.load_carrier)?;

    if cfg.qos {
        let mut admin = AdminClient::connect(pub1.local_addr(), &name("/bench/admin"))
            .map_err(|e| BenchError::ChannelDown(e.to_string()))?;
        let s = measurement_sched();
        let cmd = format!(
            "prop set {} (sched ((policy {}) (priority {}))) (qos ((priority {})))",
            sub1_name,
            s.policy().keyword(),
            s.priority(),
            PriorityClass::High.keyword()
        );
        let reply = admin
            .request(&cmd)
            .map_err(|e| BenchError::ChannelDown(e.to_string()))?;
        if !reply.starts_with("ok") {
            return Err(BenchError::ChannelDown(reply));
        }
    }

    let stop = Arc::new(AtomicBool::new(false));
    let drains = [
        drain(Arc::clone(&sub1), Arc::clone(&stop)),
        drain(Arc::clone(&sub2), Arc::clone(&stop)),
    ];
    let load_thread = if cfg.load_fraction > 0.0 {
        let spec = LoadSpec::new(cfg.load_fraction, cfg.load_message_bytes, cfg.load_carrier)?;
        let (p, stop, rate) = (
            Arc::clone(&pub2),
            Arc::clone(&stop),
            cfg.link.rate_bytes_per_sec,
        );
        let peer = sub2_name.clone();
        Some(thread::spawn(move || {
            pace_load(&p, &peer, &spec, rate, Duration::from_secs(3600), &stop)
        }))
    } else {
        None
    };
    // Let the load reach its rate before the first probe.
    if load_thread.is_some() {
        thread::sleep(Duration::from_millis(200));
    }
    let probe = run_rtt_probe(&pub1, &sub1_name, &cfg.probe, opts.ack_timeout);
    stop.store(true, Ordering::Relaxed);
    let load = match load_thread {
        Some(h) => Some(
            h.join()
                .map_err(|_| BenchError::ChannelDown(pub2_name.to_string()))??,
        ),
        None => None,
    };
    for d in drains {
        let _ = d.join();
    }
    let probe = probe?;
    let _ = pub1_name;
    Ok(ScenarioResult {
        config: cfg.clone(),
        summary: summarize(&probe.samples)?,
        drops: probe.drops,
        duplicates: probe.duplicates,
        max_lower_band_wait_ns: 0,
        load,
    })
}
