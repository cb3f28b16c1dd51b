//! Benchmarks run entirely in virtual time over an [`EmuTopology`].

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{
    BenchError, LoadReport, LoadSpec, ProbeOutcome, ProbeSpec, Scenario, ScenarioConfig,
    ScenarioResult,
};
use crate::bench::stats::{summarize, RttSample};
use crate::netemu::config::profile_for;
use crate::netemu::{EmuTopology, FlowId, FlowSpec, LinkSpec, TransportProfile};
use crate::qos::{PriorityClass, SchedPolicy, SchedRequest};
use crate::wire::HEADER_LEN;

const NS_PER_SEC: f64 = 1e9;
/// An ACK frame is a bare header.
const ACK_FRAME_BYTES: u32 = HEADER_LEN as u32;

fn frame_bytes(payload: u32) -> u32 {
    payload + HEADER_LEN as u32
}

/// Per-configuration probe result before summarizing.
struct ProbeRun {
    outcome: ProbeOutcome,
    load_deliveries: Vec<u64>,
}

/// Submits every probe, answers each delivered probe with an ACK on `rev`
/// and runs the topology until it drains.
fn drive(
    topo: &mut EmuTopology,
    fwd: FlowId,
    rev: FlowId,
    probe: &ProbeSpec,
    send_times: &[u64],
    load: Option<FlowId>,
) -> ProbeRun {
    let frame = frame_bytes(probe.size_bytes);
    for (i, &t) in send_times.iter().enumerate() {
        topo.submit_at(t, fwd, frame, i as u64, None);
    }
    let mut acked: Vec<Option<u64>> = vec![None; send_times.len()];
    let mut worst_wait = vec![0u64; send_times.len()];
    let mut duplicates = 0u64;
    let mut load_deliveries = Vec::new();
    while let Some((_, delivered)) = topo.step_next() {
        for d in delivered {
            let i = d.token as usize;
            if d.flow == fwd {
                worst_wait[i] = worst_wait[i].max(d.max_lower_band_wait_ns);
                topo.submit_at(d.delivered_ns, rev, ACK_FRAME_BYTES, d.token, None);
            } else if d.flow == rev {
                worst_wait[i] = worst_wait[i].max(d.max_lower_band_wait_ns);
                match acked[i] {
                    Some(_) => duplicates += 1,
                    None => acked[i] = Some(d.delivered_ns),
                }
            } else if Some(d.flow) == load {
                load_deliveries.push(d.delivered_ns);
            }
        }
    }
    topo.take_losses();
    let mut samples = Vec::new();
    let mut drops = 0;
    let mut max_wait = 0;
    for i in probe.warmup..send_times.len() {
        match acked[i] {
            Some(ack_ns) => {
                samples.push(RttSample {
                    message_id: i as u64,
                    send_ns: send_times[i],
                    ack_ns,
                });
                max_wait = max_wait.max(worst_wait[i]);
            }
            None => drops += 1,
        }
    }
    ProbeRun {
        outcome: ProbeOutcome {
            samples,
            drops,
            duplicates,
            max_lower_band_wait_ns: max_wait,
        },
        load_deliveries,
    }
}

fn check_acks(probe: &ProbeSpec, outcome: &ProbeOutcome) -> Result<(), BenchError> {
    if probe.count > 0 && outcome.samples.is_empty() {
        return Err(BenchError::ZeroAcks);
    }
    Ok(())
}

/// Probes the `fwd`/`rev` flow pair of an existing topology at evenly spaced
/// virtual times starting now.
pub fn run_rtt_probe_emulated(
    topo: &mut EmuTopology,
    fwd: FlowId,
    rev: FlowId,
    probe: &ProbeSpec,
) -> Result<ProbeOutcome, BenchError> {
    let start = topo.now();
    let period = probe.period_ns();
    let times: Vec<u64> = (0..probe.total())
        .map(|i| start + (i as f64 * period).round() as u64)
        .collect();
    let run = drive(topo, fwd, rev, probe, &times, None);
    check_acks(probe, &run.outcome)?;
    Ok(run.outcome)
}

/// Paces load messages so their wire bytes average `fraction × rate`.
fn submit_load(
    topo: &mut EmuTopology,
    flow: FlowId,
    spec: &LoadSpec,
    rate: u64,
    start: u64,
    end: u64,
) -> u64 {
    let frame = frame_bytes(spec.message_size_bytes);
    let period =
        spec.wire_bytes_per_message() as f64 * NS_PER_SEC / (spec.fraction() * rate as f64);
    let mut n = 0u64;
    loop {
        let t = start + (n as f64 * period).round() as u64;
        if t >= end {
            return n;
        }
        topo.submit_at(t, flow, frame, n, None);
        n += 1;
    }
}

fn load_report(
    spec: &LoadSpec,
    rate: u64,
    start: u64,
    duration_ns: u64,
    deliveries: &[u64],
) -> LoadReport {
    let target = spec.fraction() * rate as f64;
    let wire = spec.wire_bytes_per_message() as f64;
    let end = start + duration_ns;
    let in_window = deliveries
        .iter()
        .filter(|&&t| t >= start && t < end)
        .count();
    let achieved = if duration_ns == 0 {
        0.0
    } else {
        in_window as f64 * wire * NS_PER_SEC / duration_ns as f64
    };
    let whole_seconds = duration_ns / 1_000_000_000;
    let mut windows = vec![0.0; whole_seconds as usize];
    for &t in deliveries {
        if t >= start {
            let w = ((t - start) / 1_000_000_000) as usize;
            if w < windows.len() {
                windows[w] += wire;
            }
        }
    }
    LoadReport {
        target_bytes_per_sec: target,
        achieved_bytes_per_sec: achieved,
        messages: in_window as u64,
        duration_ns,
        window_rates: windows,
    }
}

/// Drives `spec` over an otherwise idle two-host link for `duration_ns` of
/// virtual time.
pub fn run_load_emulated(
    spec: &LoadSpec,
    link: LinkSpec,
    duration_ns: u64,
) -> Result<LoadReport, BenchError> {
    let mut topo = EmuTopology::new();
    topo.add_host("src")?;
    topo.add_host("dst")?;
    topo.add_link("src", "dst", link)?;
    let flow = topo.add_flow(FlowSpec::new("src", "dst").profile(spec.profile()))?;
    submit_load(
        &mut topo,
        flow,
        spec,
        link.rate_bytes_per_sec,
        0,
        duration_ns,
    );
    let deliveries: Vec<u64> = topo
        .run_to_completion()
        .into_iter()
        .map(|d| d.delivered_ns)
        .collect();
    Ok(load_report(
        spec,
        link.rate_bytes_per_sec,
        0,
        duration_ns,
        &deliveries,
    ))
}

pub(super) struct Placement {
    pub probe_src: &'static str,
    pub probe_dst: &'static str,
    pub load_src: &'static str,
    pub load_dst: &'static str,
}

pub(super) fn placement(scenario: Scenario) -> Placement {
    match scenario {
        // Both publishers share host1's NIC queue.
        Scenario::NicCongestion => Placement {
            probe_src: "host1",
            probe_dst: "host2",
            load_src: "host1",
            load_dst: "host3",
        },
        // Separate publishers meet at the switch port facing host3.
        Scenario::SwitchCongestion => Placement {
            probe_src: "host1",
            probe_dst: "host3",
            load_src: "host2",
            load_dst: "host3",
        },
    }
}

/// Thread scheduling given to the measurement channel when QoS is on.
pub fn measurement_sched() -> SchedRequest {
    SchedRequest::new(SchedPolicy::Fifo, 30).expect("FIFO/30 is in range")
}

/// Builds the three-host, one-switch topology used by both scenarios.
pub fn scenario_topology(link: LinkSpec) -> Result<EmuTopology, BenchError> {
    let mut topo = EmuTopology::new();
    topo.add_switch("switch")?;
    for h in ["host1", "host2", "host3"] {
        topo.add_host(h)?;
        topo.add_link(h, "switch", link)?;
    }
    Ok(topo)
}

/// Runs one configuration of a scenario. Identical configurations give
/// identical results.
pub fn run_scenario_emulated(cfg: &ScenarioConfig) -> Result<ScenarioResult, BenchError> {
    run_scenario_emulated_in(cfg, scenario_topology(cfg.link)?)
}

/// Like [`run_scenario_emulated`] on a caller-built topology, which must
/// provide hosts `host1`, `host2` and `host3`. Load is paced against the
/// load source's first-hop link rate.
pub fn run_scenario_emulated_in(
    cfg: &ScenarioConfig,
    mut topo: EmuTopology,
) -> Result<ScenarioResult, BenchError> {
    cfg.validate()?;
    let place = placement(cfg.scenario);
    let probe_profile: TransportProfile = profile_for(cfg.probe_carrier);
    let mut probe_flow = FlowSpec::new(place.probe_src, place.probe_dst).profile(probe_profile);
    if cfg.qos {
        probe_flow = probe_flow
            .tos(PriorityClass::High.tos())
            .thread_rank(measurement_sched().rank());
    }
    let fwd = topo.add_flow(probe_flow)?;
    let rev =
        topo.add_flow(FlowSpec::new(place.probe_dst, place.probe_src).profile(probe_profile))?;

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let period = cfg.probe.period_ns();
    let times: Vec<u64> = (0..cfg.probe.total())
        .map(|i| (i as f64 * period).round() as u64 + rng.random_range(0..period.max(1.0) as u64))
        .collect();
    let end = times.last().map_or(0, |&t| t + period as u64);

    let load = if cfg.load_fraction > 0.0 {
        let spec = LoadSpec::new(cfg.load_fraction, cfg.load_message_bytes, cfg.load_carrier)?;
        let flow =
            topo.add_flow(FlowSpec::new(place.load_src, place.load_dst).profile(spec.profile()))?;
        let (from, to) = topo
            .flow_route(flow)
            .into_iter()
            .next()
            .expect("a flow crosses at least one link");
        let rate = topo.link_spec(&from, &to)?.rate_bytes_per_sec;
        submit_load(&mut topo, flow, &spec, rate, 0, end);
        Some((flow, spec, rate))
    } else {
        None
    };

    let run = drive(
        &mut topo,
        fwd,
        rev,
        &cfg.probe,
        &times,
        load.as_ref().map(|(f, _, _)| *f),
    );
    check_acks(&cfg.probe, &run.outcome)?;
    let summary = summarize(&run.outcome.samples)?;
    let load_report =
        load.map(|(_, spec, rate)| load_report(&spec, rate, 0, end, &run.load_deliveries));
    Ok(ScenarioResult {
        config: cfg.clone(),
        summary,
        drops: run.outcome.drops,
        duplicates: run.outcome.duplicates,
        max_lower_band_wait_ns: run.outcome.max_lower_band_wait_ns,
        load: load_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::CarrierId;

    #[test]
    fn loopback_rtt_is_probe_plus_ack_serialization() {
        let mut topo = EmuTopology::new();
        topo.add_host("a").unwrap();
        topo.add_host("b").unwrap();
        let link = LinkSpec {
            rate_bytes_per_sec: 1_000_000,
            ..LinkSpec::default()
        };
        topo.add_link("a", "b", link).unwrap();
        let fwd = topo.add_flow(FlowSpec::new("a", "b")).unwrap();
        let rev = topo.add_flow(FlowSpec::new("b", "a")).unwrap();
        let probe = ProbeSpec {
            size_bytes: 100,
            rate_hz: 100.0,
            count: 20,
            warmup: 5,
        };
        let out = run_rtt_probe_emulated(&mut topo, fwd, rev, &probe).unwrap();
        assert_eq!(out.samples.len(), 20);
        // 125-byte DATA frame plus 25-byte ACK at 1 byte/us.
        assert!(out.samples.iter().all(|s| s.rtt_ns() == 150_000));
        assert_eq!(out.samples[0].message_id, 5);
    }

    #[test]
    fn count_zero_is_empty() {
        let mut topo = scenario_topology(LinkSpec::default()).unwrap();
        let fwd = topo.add_flow(FlowSpec::new("host1", "host2")).unwrap();
        let rev = topo.add_flow(FlowSpec::new("host2", "host1")).unwrap();
        let probe = ProbeSpec {
            count: 0,
            warmup: 0,
            ..ProbeSpec::new(64)
        };
        assert!(run_rtt_probe_emulated(&mut topo, fwd, rev, &probe)
            .unwrap()
            .samples
            .is_empty());
    }

    #[test]
    fn lossy_link_gives_zero_acks() {
        let mut topo = scenario_topology(LinkSpec::default()).unwrap();
        topo.set_link_lossy("switch", "host2", true).unwrap();
        let fwd = topo
            .add_flow(FlowSpec::new("host1", "host2").profile(profile_for(CarrierId::Udp)))
            .unwrap();
        let rev = topo.add_flow(FlowSpec::new("host2", "host1")).unwrap();
        let probe = ProbeSpec {
            count: 10,
            warmup: 0,
            ..ProbeSpec::new(64)
        };
        assert!(matches!(
            run_rtt_probe_emulated(&mut topo, fwd, rev, &probe),
            Err(BenchError::ZeroAcks)
        ));
    }

    #[test]
    fn zero_duration_load_is_empty() {
        let spec = LoadSpec::new(0.5, 16 * 1024, CarrierId::Tcp).unwrap();
        let r = run_load_emulated(&spec, LinkSpec::default(), 0).unwrap();
        assert_eq!(r.messages, 0);
        assert!(!r.cannot_sustain());
    }
}
