//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when a
//! gating criterion fails.

use std::collections::{HashMap, HashSet};
use std::net::{IpAddr, Ipv4Addr};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use prioport_core::bench::{
    run_rtt_probe, run_scenario_emulated, ProbeSpec, Scenario, ScenarioConfig, ScenarioResult,
};
use prioport_core::nameserver::NameError;
use prioport_core::netemu::{
    BandQueue, EmuNetwork, EmuPacket, EmuTopology, FlowSpec, LinkSpec, TransportProfile,
};
use prioport_core::port::Message;
use prioport_core::qos::admin::{
    parse_admin_command, parse_sexprs, AdminRequest, PropertySetting, QosSetting, SExpr,
};
use prioport_core::qos::{
    class_to_dscp, dscp_to_tos, tos_to_band, DscpCodepoint, OsScheduler, RefusingScheduler,
    SchedPolicy, ThreadScheduler,
};
use prioport_core::wire::{decode_frame, encode_frame, DecodeError, Frame, FrameType};
use prioport_core::{
    AdminClient, CarrierId, EndpointTriplet, NameClient, NameServer, Port, PortConfig, PortName,
    PriorityClass, SchedRequest,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn name(s: &str) -> PortName {
    PortName::new(s).unwrap()
}

// ---- 1 ----------------------------------------------------------------------

fn class_mapping() -> Check {
    // class, mnemonic, codepoint, TOS byte, band
    let table = [
        (PriorityClass::Low, "AF11", 10u8, 0x28u8, 2usize),
        (PriorityClass::Normal, "Default", 0, 0x00, 1),
        (PriorityClass::High, "AF42", 36, 0x90, 0),
        (PriorityClass::Critical, "VA", 44, 0xB0, 0),
    ];
    for (class, mnemonic, value, tos, band) in table {
        let d = class_to_dscp(class);
        ensure(d.value() == value, || {
            format!("{class:?}: dscp {} != {value}", d.value())
        })?;
        ensure(d.mnemonic().as_deref() == Some(mnemonic), || {
            format!("{class:?}: mnemonic {:?}", d.mnemonic())
        })?;
        ensure(dscp_to_tos(d) == tos, || {
            format!("{class:?}: tos {:#04x} != {tos:#04x}", dscp_to_tos(d))
        })?;
        ensure(class.tos() == tos, || format!("{class:?}: class tos"))?;
        let b = tos_to_band(tos).index();
        ensure(b == band, || format!("{class:?}: band {b} != {band}"))?;
    }
    Ok("4 classes match".into())
}

// ---- 2 ----------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Op {
    Enq(usize),
    Deq,
}

const BAND_TOS: [u8; 3] = [0x90, 0x00, 0x28];

/// Reference model: a flat list scanned for the best (band, arrival) pair.
struct Reference {
    items: Vec<(usize, u64)>,
    cap: usize,
}

impl Reference {
    fn enqueue(&mut self, band: usize, id: u64) -> bool {
        if self.items.iter().filter(|(b, _)| *b == band).count() >= self.cap {
            return false;
        }
        self.items.push((band, id));
        true
    }

    fn dequeue(&mut self) -> Option<u64> {
        let best = (0..self.items.len()).min_by_key(|&i| self.items[i].0)?;
        Some(self.items.remove(best).1)
    }
}

fn replay(ops: &[Op], cap: usize) -> Result<(), String> {
    let mut q = BandQueue::new(cap);
    let mut r = Reference {
        items: Vec::new(),
        cap,
    };
    let mut id = 0u64;
    for op in ops {
        match *op {
            Op::Enq(band) => {
                let got = matches!(
                    q.enqueue(EmuPacket::new(id, BAND_TOS[band], 100)),
                    prioport_core::netemu::Admission::Accepted(_)
                );
                if got != r.enqueue(band, id) {
                    return Err(format!("admission of packet {id} differs"));
                }
                id += 1;
            }
            Op::Deq => {
                let got = q.dequeue().map(|p| p.id);
                let want = r.dequeue();
                if got != want {
                    return Err(format!("dequeue {got:?} != reference {want:?}"));
                }
            }
        }
    }
    Ok(())
}

/// Every sequence of `enq` enqueues (any bands) interleaved with `deq` dequeues.
fn enumerate(
    enq: usize,
    deq: usize,
    prefix: &mut Vec<Op>,
    visit: &mut dyn FnMut(&[Op]) -> Result<(), String>,
) -> Result<(), String> {
    if enq == 0 && deq == 0 {
        return visit(prefix);
    }
    if enq > 0 {
        for band in 0..3 {
            prefix.push(Op::Enq(band));
            enumerate(enq - 1, deq, prefix, visit)?;
            prefix.pop();
        }
    }
    if deq > 0 {
        prefix.push(Op::Deq);
        enumerate(enq, deq - 1, prefix, visit)?;
        prefix.pop();
    }
    Ok(())
}

fn strict_priority_oracle() -> Check {
    let mut cases = 0u64;
    for n in 0..=6 {
        for cap in [2usize, 1000] {
            let mut visit = |ops: &[Op]| {
                cases += 1;
                replay(ops, cap).map_err(|e| format!("n={n} cap={cap}: {e}"))
            };
            enumerate(n, n, &mut Vec::new(), &mut visit)?;
        }
    }
    Ok(format!("{cases} interleavings, 0 divergences"))
}

// ---- 3 ----------------------------------------------------------------------

fn head_of_line_bound() -> Check {
    let mut rng = StdRng::seed_from_u64(3);
    let link = LinkSpec::default();
    let raw = TransportProfile::raw();
    let max = raw.max_segment();
    let bound = link.serialization_ns(max);
    let mut trials = 0;
    let mut worst = 0u64;
    for order in 0..100 {
        for k in 0..=10usize {
            for via_switch in [false, true] {
                // The probe's position among the k backlog packets and its offset
                // inside that slot are randomized.
                let slot = rng.random_range(0..=k);
                let offset = rng.random_range(0..bound);
                let probe_size = rng.random_range(64..=max);
                let run = |with_load: bool| -> Result<u64, String> {
                    let mut t = EmuTopology::new();
                    let (src, load_src) = if via_switch {
                        t.add_switch("sw").unwrap();
                        for h in ["a", "b", "c"] {
                            t.add_host(h).unwrap();
                            t.add_link(h, "sw", link).unwrap();
                        }
                        ("a", "b")
                    } else {
                        t.add_host("a").unwrap();
                        t.add_host("c").unwrap();
                        t.add_link("a", "c", link).unwrap();
                        ("a", "a")
                    };
                    let probe = t
                        .add_flow(
                            FlowSpec::new(src, "c")
                                .tos(PriorityClass::High.tos())
                                .profile(raw),
                        )
                        .map_err(|e| e.to_string())?;
                    let load = t
                        .add_flow(FlowSpec::new(load_src, "c").profile(raw))
                        .map_err(|e| e.to_string())?;
                    let at = slot as u64 * bound + offset;
                    if with_load {
                        for i in 0..k {
                            t.submit_at(0, load, max, i as u64, None);
                        }
                    }
                    t.submit_at(at, probe, probe_size, 0, None);
                    let d = t
                        .run_to_completion()
                        .into_iter()
                        .find(|d| d.flow == probe)
                        .ok_or("probe not delivered")?;
                    if d.max_lower_band_wait_ns > bound {
                        return Err(format!(
                            "recorded lower-band wait {} > {bound}",
                            d.max_lower_band_wait_ns
                        ));
                    }
                    Ok(d.delivered_ns - d.submit_ns)
                };
                let loaded = run(true)?;
                let idle = run(false)?;
                let extra = loaded.saturating_sub(idle);
                worst = worst.max(extra);
                ensure(extra <= bound, || {
                    format!("order {order} k={k} switch={via_switch}: extra delay {extra} ns > {bound} ns")
                })?;
                trials += 1;
            }
        }
    }
    Ok(format!(
        "{trials} trials, worst extra delay {worst} ns <= {bound} ns, 0 violations"
    ))
}

// ---- 4, 5 -------------------------------------------------------------------

const CARRIER_PAIRS: [(CarrierId, CarrierId); 4] = [
    (CarrierId::Tcp, CarrierId::Tcp),
    (CarrierId::Tcp, CarrierId::Udp),
    (CarrierId::Udp, CarrierId::Tcp),
    (CarrierId::Udp, CarrierId::Udp),
];

fn pair(
    scenario: Scenario,
    load: f64,
    p: CarrierId,
    l: CarrierId,
) -> Result<(ScenarioResult, ScenarioResult), String> {
    let run = |qos| {
        run_scenario_emulated(&ScenarioConfig::new(scenario, qos, load, p, l))
            .map_err(|e| e.to_string())
    };
    Ok((run(false)?, run(true)?))
}

fn improves(off: &ScenarioResult, on: &ScenarioResult) -> bool {
    on.summary.mean_ns < off.summary.mean_ns && on.summary.stddev_ns < off.summary.stddev_ns
}

fn relative_gain(off: &ScenarioResult, on: &ScenarioResult) -> f64 {
    (off.summary.mean_ns - on.summary.mean_ns) / off.summary.mean_ns
}

fn nic_congestion() -> Check {
    let mut notes = Vec::new();
    for (p, l) in CARRIER_PAIRS {
        let mut gains = Vec::new();
        for load in [0.2, 0.7] {
            let (off, on) = pair(Scenario::NicCongestion, load, p, l)?;
            ensure(improves(&off, &on), || {
                format!(
                    "{p}/{l} load {load}: on mean {:.0} sd {:.0} vs off mean {:.0} sd {:.0}",
                    on.summary.mean_ns,
                    on.summary.stddev_ns,
                    off.summary.mean_ns,
                    off.summary.stddev_ns
                )
            })?;
            gains.push(relative_gain(&off, &on));
        }
        ensure(gains[1] > gains[0], || {
            format!(
                "{p}/{l}: gain at 0.7 ({:.3}) <= gain at 0.2 ({:.3})",
                gains[1], gains[0]
            )
        })?;
        notes.push(format!(
            "{p}/{l} {:.0}%->{:.0}%",
            gains[0] * 100.0,
            gains[1] * 100.0
        ));
    }
    Ok(format!("mean reduction {}", notes.join(", ")))
}

fn switch_congestion() -> Check {
    let mut notes = Vec::new();
    for (p, l) in CARRIER_PAIRS {
        let (off, on) = pair(Scenario::SwitchCongestion, 0.7, p, l)?;
        ensure(improves(&off, &on), || {
            format!(
                "{p}/{l}: on mean {:.0} sd {:.0} vs off mean {:.0} sd {:.0}",
                on.summary.mean_ns,
                on.summary.stddev_ns,
                off.summary.mean_ns,
                off.summary.stddev_ns
            )
        })?;
        notes.push(format!("{p}/{l} {:.0}%", relative_gain(&off, &on) * 100.0));
    }
    Ok(format!("mean reduction at 0.7 load {}", notes.join(", ")))
}

// ---- 6 ----------------------------------------------------------------------

const SCHED_COMMAND: &str = "prop set /subscriber1 (sched \n                          ((policy SCHED_FIFO) \n                           (priority 30))) ";
const QOS_COMMAND: &str = "prop set /subscriber1 (qos ((priority HIGH))) ";

fn refusing() -> Arc<dyn ThreadScheduler> {
    Arc::new(RefusingScheduler::new("permission"))
}

fn unregistered(sched: Arc<dyn ThreadScheduler>) -> PortConfig {
    PortConfig::default().unregistered().with_scheduler(sched)
}

fn connected_pair(
    src: &str,
    dst: &str,
    sched: Arc<dyn ThreadScheduler>,
) -> Result<(Port, Port), String> {
    let p = Port::open(name(src), unregistered(Arc::clone(&sched))).map_err(|e| e.to_string())?;
    let s = Port::open(name(dst), unregistered(sched)).map_err(|e| e.to_string())?;
    p.connect_endpoint(&name(dst), &s.endpoint(), CarrierId::Tcp)
        .map_err(|e| e.to_string())?;
    Ok((p, s))
}

fn field<'a>(items: &'a [SExpr], key: &str) -> Option<&'a SExpr> {
    items.iter().find_map(|e| match e.as_list() {
        Some([k, v]) if k.as_symbol() == Some(key) => Some(v),
        _ => None,
    })
}

/// Scheduling, TOS and queue length as reported by `prop get`.
fn observed(reply: &str) -> Result<(String, i64, u8, i64), String> {
    let body = reply
        .strip_prefix("ok ")
        .ok_or_else(|| format!("reply {reply:?}"))?;
    let top: Vec<SExpr> = parse_sexprs(body)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(_, e)| e)
        .collect();
    let sched = field(&top, "sched")
        .and_then(SExpr::as_list)
        .ok_or("no sched")?;
    let policy = field(sched, "policy")
        .and_then(SExpr::as_symbol)
        .ok_or("no policy")?
        .to_string();
    let Some(SExpr::Int(prio)) = field(sched, "priority") else {
        return Err("no priority".into());
    };
    let qos = field(&top, "qos")
        .and_then(SExpr::as_list)
        .ok_or("no qos")?;
    let tos = match (
        field(qos, "tos"),
        field(qos, "priority").and_then(SExpr::as_symbol),
    ) {
        (Some(SExpr::Int(t)), _) => *t as u8,
        (None, Some("LOW")) => 0x28,
        (None, Some("NORMAL")) => 0x00,
        (None, Some("HIGH")) => 0x90,
        (None, Some("CRITICAL")) => 0xB0,
        other => return Err(format!("unreadable qos {other:?}")),
    };
    let Some(SExpr::Int(qlen)) = field(&top, "qlen") else {
        return Err("no qlen".into());
    };
    Ok((policy, *prio, tos, *qlen))
}

fn random_sched(rng: &mut StdRng) -> SchedRequest {
    match rng.random_range(0..3) {
        0 => SchedRequest::new(SchedPolicy::Other, 0).unwrap(),
        1 => SchedRequest::new(SchedPolicy::Fifo, rng.random_range(1..=99)).unwrap(),
        _ => SchedRequest::new(SchedPolicy::RoundRobin, rng.random_range(1..=99)).unwrap(),
    }
}

fn random_qos(rng: &mut StdRng) -> QosSetting {
    match rng.random_range(0..3) {
        0 => QosSetting::Class(PriorityClass::ALL[rng.random_range(0..4)]),
        1 => QosSetting::Dscp(DscpCodepoint::new(rng.random_range(0..64)).unwrap()),
        _ => QosSetting::Tos(rng.random()),
    }
}

fn random_setting(rng: &mut StdRng) -> PropertySetting {
    match rng.random_range(0..3) {
        0 => PropertySetting::Sched(random_sched(rng)),
        1 => PropertySetting::Qos(random_qos(rng)),
        _ => PropertySetting::QueueLength(rng.random_range(1..=512)),
    }
}

fn random_name(rng: &mut StdRng) -> PortName {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789_-./:";
    let len = rng.random_range(1..12);
    let s: String = (0..len)
        .map(|_| CHARS[rng.random_range(0..CHARS.len())] as char)
        .collect();
    name(&format!("/{s}"))
}

fn random_request(rng: &mut StdRng) -> AdminRequest {
    match rng.random_range(0..5) {
        0 => AdminRequest::PropSet {
            peer: random_name(rng),
            settings: (0..rng.random_range(1..5))
                .map(|_| random_setting(rng))
                .collect(),
        },
        1 => AdminRequest::PropGet {
            peer: random_name(rng),
        },
        2 => AdminRequest::Connect {
            peer: random_name(rng),
            carrier: CarrierId::ALL[rng.random_range(0..3)],
        },
        3 => AdminRequest::Disconnect {
            peer: random_name(rng),
        },
        _ => AdminRequest::List,
    }
}

fn admin_protocol() -> Check {
    // Both example commands, verbatim, through a real admin session.
    let ns = NameServer::start("127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
    let cfg = || {
        PortConfig::default()
            .with_nameserver(ns.local_addr())
            .with_scheduler(refusing())
    };
    let p = Port::open(name("/publisher1"), cfg()).map_err(|e| e.to_string())?;
    let _s = Port::open(name("/subscriber1"), cfg()).map_err(|e| e.to_string())?;
    p.connect(&name("/subscriber1"), CarrierId::Tcp)
        .map_err(|e| e.to_string())?;
    let mut admin = AdminClient::connect_by_name(
        &NameClient::new(ns.local_addr()),
        &name("/publisher1"),
        &name("/admin"),
    )
    .map_err(|e| e.to_string())?;
    let r1 = admin.request(SCHED_COMMAND).map_err(|e| e.to_string())?;
    ensure(r1.starts_with("ok"), || format!("sched command: {r1}"))?;
    let r2 = admin.request(QOS_COMMAND).map_err(|e| e.to_string())?;
    ensure(r2 == "ok", || format!("qos command: {r2}"))?;
    let info = p
        .channel_info(&name("/subscriber1"))
        .map_err(|e| e.to_string())?;
    ensure(
        info.sched.policy == SchedPolicy::Fifo && info.sched.priority == 30,
        || format!("sched {:?}", info.sched),
    )?;
    ensure(info.packet_priority() == PriorityClass::High, || {
        format!("tos {:#x}", info.tos)
    })?;

    // Set-then-get coherence.
    let (p, _s) = connected_pair("/coherent", "/peer", refusing())?;
    let mut rng = StdRng::seed_from_u64(6);
    let (mut policy, mut prio, mut tos, mut qlen) = ("SCHED_OTHER".to_string(), 0i64, 0u8, 64i64);
    for seq in 0..1000 {
        for _ in 0..rng.random_range(1..4) {
            let settings: Vec<PropertySetting> = (0..rng.random_range(1..4))
                .map(|_| random_setting(&mut rng))
                .collect();
            for s in &settings {
                match s {
                    PropertySetting::Sched(r) => {
                        policy = r.policy().keyword().to_string();
                        prio = r.priority() as i64;
                    }
                    PropertySetting::Qos(q) => tos = q.tos(),
                    PropertySetting::QueueLength(n) => qlen = *n as i64,
                }
            }
            let cmd = AdminRequest::PropSet {
                peer: name("/peer"),
                settings,
            }
            .render();
            let reply = p.handle_admin(&cmd);
            ensure(reply.starts_with("ok"), || {
                format!("sequence {seq}: {cmd} -> {reply}")
            })?;
            let got = observed(&p.handle_admin("prop get /peer"))?;
            let want = (policy.clone(), prio, tos, qlen);
            ensure(got == want, || {
                format!("sequence {seq}: after {cmd}: got {got:?}, want {want:?}")
            })?;
        }
    }

    // parse(render(r)) = r.
    let mut rng = StdRng::seed_from_u64(66);
    let n = 10_000;
    for _ in 0..n {
        let r = random_request(&mut rng);
        let text = r.render();
        let back = parse_admin_command(&text).map_err(|e| format!("{text:?}: {e}"))?;
        ensure(back == r, || format!("{text:?} parsed as {back:?}"))?;
    }
    Ok(format!(
        "example commands ok, 1000 coherent sequences, {n} round-trips"
    ))
}

// ---- 7 ----------------------------------------------------------------------

#[derive(Debug, PartialEq)]
enum Expect {
    Frame(usize),
    Truncated,
    BadMagic,
    BadVersion,
    BadType,
}

/// Header byte offset, validity test, error when the test fails.
type HeaderCheck = (usize, fn(u8) -> bool, Expect);

/// Classification read straight off the header layout.
fn classify(b: &[u8]) -> Expect {
    let checks: [HeaderCheck; 4] = [
        (0, |x| x == 0x59, Expect::BadMagic),
        (1, |x| x == 0x50, Expect::BadMagic),
        (2, |x| x == 1, Expect::BadVersion),
        (3, |x| x <= 4, Expect::BadType),
    ];
    for (i, ok, err) in checks {
        match b.get(i) {
            None => return Expect::Truncated,
            Some(&x) if !ok(x) => return err,
            _ => {}
        }
    }
    if b.len() < 25 {
        return Expect::Truncated;
    }
    let total = 25 + u32::from_be_bytes([b[21], b[22], b[23], b[24]]) as usize;
    if b.len() < total {
        Expect::Truncated
    } else {
        Expect::Frame(total)
    }
}

fn check_decode(b: &[u8]) -> Result<(), String> {
    let want = classify(b);
    match (decode_frame(b), &want) {
        (Ok((f, used)), Expect::Frame(total)) => {
            ensure(used == *total, || format!("consumed {used} != {total}"))?;
            ensure(f.frame_type as u8 == b[3] && f.flags == b[4], || {
                "type/flags".into()
            })?;
            ensure(
                f.message_id == u64::from_be_bytes(b[5..13].try_into().unwrap()),
                || "message id".into(),
            )?;
            ensure(
                f.timestamp_ns == u64::from_be_bytes(b[13..21].try_into().unwrap()),
                || "timestamp".into(),
            )?;
            ensure(f.payload[..] == b[25..*total], || "payload".into())
        }
        (Err(DecodeError::Truncated { .. }), Expect::Truncated)
        | (Err(DecodeError::BadMagic), Expect::BadMagic)
        | (Err(DecodeError::UnknownVersion(_)), Expect::BadVersion)
        | (Err(DecodeError::UnknownType(_)), Expect::BadType) => Ok(()),
        (got, _) => Err(format!(
            "{:02x?}: decoded {got:?}, expected {want:?}",
            &b[..b.len().min(32)]
        )),
    }
}

fn random_frame(rng: &mut StdRng) -> Frame {
    let len = if rng.random_bool(0.9) {
        rng.random_range(0..64)
    } else {
        rng.random_range(0..4096)
    };
    let mut payload = vec![0u8; len];
    rng.fill(&mut payload[..]);
    Frame::new(
        FrameType::ALL[rng.random_range(0..5)],
        rng.random(),
        rng.random(),
        payload,
    )
    .with_flags(rng.random())
}

fn codec_and_registry() -> Check {
    let mut rng = StdRng::seed_from_u64(7);
    let rounds = 100_000;
    let mut stream = Vec::new();
    let mut sent = Vec::new();
    for _ in 0..rounds {
        let f = random_frame(&mut rng);
        let bytes = encode_frame(&f).map_err(|e| e.to_string())?;
        let (back, used) = decode_frame(&bytes).map_err(|e| e.to_string())?;
        ensure(back == f && used == bytes.len(), || {
            format!("round trip of {f:?}")
        })?;
        if sent.len() < 1000 {
            stream.extend_from_slice(&bytes);
            sent.push(f);
        }
    }
    let mut at = 0;
    for f in &sent {
        let (back, used) = decode_frame(&stream[at..]).map_err(|e| e.to_string())?;
        ensure(back == *f, || "stream order".into())?;
        at += used;
    }
    ensure(at == stream.len(), || "stream leftovers".into())?;

    let fuzz = 200_000;
    for i in 0..fuzz {
        let bytes: Vec<u8> = match i % 4 {
            0 => {
                let mut b = vec![0u8; rng.random_range(0..48)];
                rng.fill(&mut b[..]);
                b
            }
            1 => {
                let mut b = encode_frame(&random_frame(&mut rng)).unwrap();
                let cut = rng.random_range(0..=b.len());
                b.truncate(cut);
                b
            }
            2 => {
                let mut b = encode_frame(&random_frame(&mut rng)).unwrap();
                let at = rng.random_range(0..b.len());
                b[at] ^= 1 << rng.random_range(0..8);
                b
            }
            _ => {
                let mut b = vec![0x59, 0x50, rng.random_range(0..3), rng.random_range(0..8)];
                let mut rest = vec![0u8; rng.random_range(0..40)];
                rng.fill(&mut rest[..]);
                b.extend(rest);
                b
            }
        };
        check_decode(&bytes)?;
    }

    let clients = 16;
    let per_client = 625;
    let ns = NameServer::start("127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
    let addr = ns.local_addr();
    let pool: Vec<PortName> = (0..12).map(|i| name(&format!("/shared{i}"))).collect();
    let owners: Arc<Mutex<HashMap<PortName, usize>>> = Arc::default();
    let handles: Vec<_> = (0..clients)
        .map(|c| {
            let pool = pool.clone();
            let owners = Arc::clone(&owners);
            thread::spawn(move || -> Result<(), String> {
                let client = NameClient::new(addr);
                let mine = EndpointTriplet::new(
                    IpAddr::V4(Ipv4Addr::LOCALHOST),
                    20_000 + c as u16,
                    CarrierId::Tcp,
                )
                .unwrap();
                let mut rng = StdRng::seed_from_u64(70 + c as u64);
                let mut held: HashSet<PortName> = HashSet::new();
                for _ in 0..per_client {
                    let n = &pool[rng.random_range(0..pool.len())];
                    match rng.random_range(0..3) {
                        0 => match client.register(n, mine) {
                            Ok(()) => {
                                let prev = owners.lock().unwrap().insert(n.clone(), c);
                                if let Some(p) = prev.filter(|&p| p != c) {
                                    return Err(format!("{n} granted to {c} while held by {p}"));
                                }
                                held.insert(n.clone());
                            }
                            Err(NameError::AlreadyRegistered) => {
                                if held.contains(n) {
                                    return Err(format!("{c} refused its own {n}"));
                                }
                            }
                            Err(e) => return Err(e.to_string()),
                        },
                        1 => match client.lookup(n) {
                            Ok(ep) => {
                                let owner = ep.port_number as usize - 20_000;
                                if held.contains(n) != (owner == c) {
                                    return Err(format!(
                                        "{n} resolved to client {owner}, lookup by {c}"
                                    ));
                                }
                            }
                            Err(NameError::NotFound) => {
                                if held.contains(n) {
                                    return Err(format!("{n} vanished while held by {c}"));
                                }
                            }
                            Err(e) => return Err(e.to_string()),
                        },
                        _ => {
                            if held.remove(n) {
                                owners.lock().unwrap().remove(n);
                                client.unregister(n).map_err(|e| e.to_string())?;
                            }
                        }
                    }
                }
                Ok(())
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| "client panicked".to_string())??;
    }
    let listed = NameClient::new(addr).list().map_err(|e| e.to_string())?;
    let unique: HashSet<&PortName> = listed.iter().map(|(n, _)| n).collect();
    ensure(unique.len() == listed.len(), || {
        "a name is listed twice".into()
    })?;
    let owners = owners.lock().unwrap();
    ensure(listed.len() == owners.len(), || {
        format!("{} listed vs {} held", listed.len(), owners.len())
    })?;
    for (n, ep) in &listed {
        ensure(
            owners.get(n) == Some(&(ep.port_number as usize - 20_000)),
            || format!("{n} owner mismatch"),
        )?;
    }
    Ok(format!(
        "{rounds} round-trips, {fuzz} fuzzed decodes, {} registry ops from {clients} clients",
        clients * per_client
    ))
}

// ---- 8 ----------------------------------------------------------------------

fn emu_pair(src: &str, dst: &str) -> Result<(EmuNetwork, Port, Port), String> {
    let mut t = EmuTopology::new();
    t.add_host("a").unwrap();
    t.add_host("b").unwrap();
    t.add_link("a", "b", LinkSpec::default()).unwrap();
    let net = EmuNetwork::new(t);
    let p = Port::open(
        name(src),
        unregistered(refusing()).with_emu(net.clone(), "a"),
    )
    .map_err(|e| e.to_string())?;
    let s = Port::open(
        name(dst),
        unregistered(refusing()).with_emu(net.clone(), "b"),
    )
    .map_err(|e| e.to_string())?;
    p.connect_endpoint(&name(dst), &s.endpoint(), CarrierId::Emu)
        .map_err(|e| e.to_string())?;
    Ok((net, p, s))
}

fn decoupling() -> Check {
    let (net, p, _s) = emu_pair("/stall_src", "/stall_dst")?;
    net.set_blocked("a", "b", true);
    let payload = bytes::Bytes::from(vec![0u8; 1024]);
    let mut times: Vec<Duration> = (0..1000)
        .map(|_| {
            let t = Instant::now();
            p.publish(Message::new(payload.clone()));
            t.elapsed()
        })
        .collect();
    times.sort();
    let median = times[500];
    ensure(median < Duration::from_millis(1), || {
        format!("median publish {median:?}")
    })?;
    net.set_blocked("a", "b", false);

    let ns = NameServer::start("127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
    let cfg = || {
        PortConfig::default()
            .with_nameserver(ns.local_addr())
            .with_scheduler(refusing())
    };
    let a = Port::open(name("/early"), cfg()).map_err(|e| e.to_string())?;
    let b = Port::open(name("/late"), cfg()).map_err(|e| e.to_string())?;
    let ep = NameClient::new(ns.local_addr())
        .lookup(&name("/late"))
        .map_err(|e| e.to_string())?;
    ns.shutdown();
    a.connect_endpoint(&name("/late"), &ep, CarrierId::Tcp)
        .map_err(|e| format!("connect after shutdown: {e}"))?;
    a.publish_bytes(&b"after"[..]);
    let m = b
        .read_timeout(Duration::from_secs(5))
        .map_err(|e| e.to_string())?;
    ensure(&m.message.payload[..] == b"after", || "payload".into())?;
    Ok(format!(
        "median publish {median:?} into a stalled channel; connect with name server down ok"
    ))
}

// ---- 9 ----------------------------------------------------------------------

fn conservation() -> Check {
    let mut t = EmuTopology::new();
    t.add_host("a").unwrap();
    t.add_host("b").unwrap();
    t.add_link("a", "b", LinkSpec::default()).unwrap();
    let net = EmuNetwork::new(t);
    let p = Port::open(
        name("/cons_src"),
        unregistered(refusing()).with_emu(net.clone(), "a"),
    )
    .map_err(|e| e.to_string())?;
    let s = Port::open(
        name("/cons_dst"),
        unregistered(refusing()).with_emu(net.clone(), "b"),
    )
    .map_err(|e| e.to_string())?;
    let peer = name("/cons_dst");
    let mut rng = StdRng::seed_from_u64(9);
    let trials = 1000;
    let mut totals = (0u64, 0u64);
    for trial in 0..trials {
        p.connect_endpoint(&peer, &s.endpoint(), CarrierId::Emu)
            .map_err(|e| e.to_string())?;
        let check = |info: &prioport_core::ChannelInfo, when: &str| {
            let c = &info.counters;
            ensure(
                c.enqueued == c.sent + c.dropped + info.queued as u64 + c.in_flight,
                || format!("trial {trial} {when}: {c:?} queued {}", info.queued),
            )
        };
        for _ in 0..rng.random_range(1..12) {
            match rng.random_range(0..5) {
                0 => net.set_blocked("a", "b", true),
                1 => net.set_blocked("a", "b", false),
                2 => p
                    .set_channel_queue_capacity(&peer, rng.random_range(1..=80))
                    .map_err(|e| e.to_string())?,
                3 => thread::sleep(Duration::from_micros(rng.random_range(0..300))),
                _ => {
                    for _ in 0..rng.random_range(1..100) {
                        p.publish_bytes(vec![0u8; rng.random_range(1..2000)]);
                    }
                }
            }
            check(
                &p.channel_info(&peer).map_err(|e| e.to_string())?,
                "mid-schedule",
            )?;
        }
        net.set_blocked("a", "b", false);
        if !p
            .flush(&peer, Duration::from_secs(10))
            .map_err(|e| e.to_string())?
        {
            return Err(format!("trial {trial}: channel did not drain"));
        }
        let info = p.channel_info(&peer).map_err(|e| e.to_string())?;
        let c = &info.counters;
        ensure(
            info.queued == 0 && c.in_flight == 0 && c.enqueued == c.sent + c.dropped,
            || format!("trial {trial} drained: {c:?} queued {}", info.queued),
        )?;
        p.disconnect(&peer).map_err(|e| e.to_string())?;
        let retired = p.retired_channels().pop().ok_or("no retired snapshot")?;
        let c = &retired.counters;
        ensure(c.enqueued == c.sent + c.dropped && c.in_flight == 0, || {
            format!("trial {trial} retired: {c:?}")
        })?;
        totals.0 += c.enqueued;
        totals.1 += c.dropped;
        // Let the receiver side retire before reconnecting under the same name.
        let deadline = Instant::now() + Duration::from_secs(5);
        while s.input_info(&name("/cons_src")).is_ok() {
            if Instant::now() > deadline {
                return Err(format!("trial {trial}: input channel lingered"));
            }
            thread::sleep(Duration::from_millis(1));
        }
    }
    Ok(format!(
        "{trials} trials exact ({} enqueued, {} dropped)",
        totals.0, totals.1
    ))
}

// ---- 10 ---------------------------------------------------------------------

fn real_socket_smoke() -> Check {
    let ns = NameServer::start("127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
    let cfg = || {
        PortConfig::default()
            .with_nameserver(ns.local_addr())
            .with_scheduler(Arc::new(OsScheduler))
    };
    let p = Port::open(name("/smoke_pub"), cfg()).map_err(|e| e.to_string())?;
    let s = Port::open(name("/smoke_sub"), cfg()).map_err(|e| e.to_string())?;
    p.connect(&name("/smoke_sub"), CarrierId::Tcp)
        .map_err(|e| e.to_string())?;
    let mut admin = AdminClient::connect_by_name(
        &NameClient::new(ns.local_addr()),
        &name("/smoke_pub"),
        &name("/admin"),
    )
    .map_err(|e| e.to_string())?;
    let reply = admin
        .request("prop set /smoke_sub (sched ((policy SCHED_FIFO) (priority 30))) (qos ((priority HIGH)))")
        .map_err(|e| e.to_string())?;
    ensure(reply.starts_with("ok"), || format!("qos reply {reply}"))?;
    let os_outcome = if reply == "ok" { "applied" } else { "degraded" };
    let drain_stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let stop = Arc::clone(&drain_stop);
    let s = Arc::new(s);
    let sub = Arc::clone(&s);
    let drain = thread::spawn(move || {
        while !stop.load(std::sync::atomic::Ordering::Relaxed) {
            let _ = sub.read(true, Some(Duration::from_millis(20)));
        }
    });
    let probe = ProbeSpec {
        size_bytes: 1024,
        rate_hz: 1000.0,
        count: 500,
        warmup: 50,
    };
    let out = run_rtt_probe(&p, &name("/smoke_sub"), &probe, Duration::from_secs(2))
        .map_err(|e| e.to_string());
    drain_stop.store(true, std::sync::atomic::Ordering::Relaxed);
    let _ = drain.join();
    let out = out?;
    ensure(out.drops == 0 && out.samples.len() == probe.count, || {
        format!("{} samples, {} drops", out.samples.len(), out.drops)
    })?;
    let ids: HashSet<u64> = out.samples.iter().map(|s| s.message_id).collect();
    ensure(
        ids.len() == out.samples.len() && out.samples.iter().all(|s| s.rtt_ns() > 0),
        || "sample integrity".into(),
    )?;
    let info = p
        .channel_info(&name("/smoke_sub"))
        .map_err(|e| e.to_string())?;
    let c = &info.counters;
    ensure(
        c.enqueued == c.sent + c.dropped + info.queued as u64 + c.in_flight && c.dropped == 0,
        || format!("{c:?}"),
    )?;
    ensure(info.packet_priority() == PriorityClass::High, || {
        "priority not HIGH".into()
    })?;
    let summary = prioport_core::bench::summarize(&out.samples).map_err(|e| e.to_string())?;

    // The unprivileged path: the scheduler refuses, the command still succeeds.
    let (q, _r) = connected_pair("/unpriv_pub", "/unpriv_sub", refusing())?;
    let reply = q.handle_admin("prop set /unpriv_sub (sched ((policy SCHED_FIFO) (priority 30)))");
    ensure(reply == "ok (degraded \"permission\")", || {
        format!("unprivileged reply {reply}")
    })?;
    let sched = q
        .channel_info(&name("/unpriv_sub"))
        .map_err(|e| e.to_string())?
        .sched;
    ensure(
        !sched.applied && sched.policy == SchedPolicy::Fifo && sched.priority == 30,
        || format!("{sched:?}"),
    )?;
    Ok(format!(
        "{} tcp probes, mean {:.0} ns, 0 drops; FIFO/30 {os_outcome} on this host, degraded path reported",
        out.samples.len(),
        summary.mean_ns
    ))
}

// ---- driver -----------------------------------------------------------------

struct Criterion {
    id: u32,
    title: &'static str,
    limit: Option<Duration>,
    gating: bool,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            title: "class mapping conformance",
            limit: Some(Duration::from_secs(1)),
            gating: true,
            run: class_mapping,
        },
        Criterion {
            id: 2,
            title: "strict-priority oracle equivalence",
            limit: Some(Duration::from_secs(10)),
            gating: true,
            run: strict_priority_oracle,
        },
        Criterion {
            id: 3,
            title: "head-of-line bound",
            limit: None,
            gating: true,
            run: head_of_line_bound,
        },
        Criterion {
            id: 4,
            title: "nic congestion directional reproduction",
            limit: Some(Duration::from_secs(120)),
            gating: true,
            run: nic_congestion,
        },
        Criterion {
            id: 5,
            title: "switch congestion directional reproduction",
            limit: Some(Duration::from_secs(120)),
            gating: true,
            run: switch_congestion,
        },
        Criterion {
            id: 6,
            title: "admin protocol conformance",
            limit: None,
            gating: true,
            run: admin_protocol,
        },
        Criterion {
            id: 7,
            title: "codec and registry properties",
            limit: None,
            gating: true,
            run: codec_and_registry,
        },
        Criterion {
            id: 8,
            title: "decoupling",
            limit: None,
            gating: true,
            run: decoupling,
        },
        Criterion {
            id: 9,
            title: "counter conservation",
            limit: None,
            gating: true,
            run: conservation,
        },
        Criterion {
            id: 10,
            title: "real-socket smoke test (advisory)",
            limit: None,
            gating: false,
            run: real_socket_smoke,
        },
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| filter.is_empty() || filter.contains(&c.id))
    {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
            (r, _) => r,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        println!(
            "{status} [{}] {} ({:.2?}): {detail}",
            c.id, c.title, elapsed
        );
        if result.is_err() && c.gating {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
}
