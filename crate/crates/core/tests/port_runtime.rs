use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use prioport_core::netemu::{EmuNetwork, EmuTopology, LinkSpec};
use prioport_core::port::{ChannelStatus, Direction, EnqueueOutcome, Message};
use prioport_core::qos::RefusingScheduler;
use prioport_core::{
    AdminClient, CarrierId, NameClient, NameServer, Port, PortConfig, PortError, PortName,
    PriorityClass,
};

const WAIT: Duration = Duration::from_secs(5);

fn name(s: &str) -> PortName {
    PortName::new(s).unwrap()
}

fn server() -> NameServer {
    NameServer::start("127.0.0.1:0".parse().unwrap()).unwrap()
}

fn config(ns: SocketAddr) -> PortConfig {
    PortConfig::default()
        .with_nameserver(ns)
        .with_scheduler(Arc::new(RefusingScheduler::new("permission")))
}

fn open(ns: &NameServer, n: &str) -> Port {
    Port::open(name(n), config(ns.local_addr())).unwrap()
}

fn emu_network() -> EmuNetwork {
    let mut t = EmuTopology::new();
    for h in ["a", "b", "c"] {
        t.add_host(h).unwrap();
    }
    t.add_switch("sw").unwrap();
    for h in ["a", "b", "c"] {
        t.add_link(h, "sw", LinkSpec::default()).unwrap();
    }
    EmuNetwork::new(t)
}

fn wait_until(mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + WAIT;
    while Instant::now() < end {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    false
}

#[test]
fn open_registers_and_rejects_duplicates() {
    let ns = server();
    let p = open(&ns, "/publisher1");
    let ep = NameClient::new(ns.local_addr())
        .lookup(&name("/publisher1"))
        .unwrap();
    assert_eq!(ep.socket_addr(), p.local_addr());
    assert!(matches!(
        Port::open(name("/publisher1"), config(ns.local_addr())),
        Err(PortError::NameAlreadyRegistered)
    ));
}

#[test]
fn unreachable_nameserver_is_bind_failure() {
    let dead: SocketAddr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let r = Port::open(name("/orphan"), config(dead));
    assert!(matches!(r, Err(PortError::Bind(_))), "{r:?}");
}

#[test]
fn tcp_publish_preserves_order() {
    let ns = server();
    let p = open(&ns, "/pub");
    let s = open(&ns, "/sub");
    p.connect(&name("/sub"), CarrierId::Tcp).unwrap();
    assert!(wait_until(|| s.input_info(&name("/pub")).is_ok()));
    for i in 0..10u8 {
        p.publish_bytes(vec![i; 100]);
    }
    for i in 0..10u8 {
        let m = s.read_timeout(WAIT).unwrap();
        assert_eq!(m.peer, name("/pub"));
        assert_eq!(&m.message.payload[..], &[i; 100][..]);
    }
    assert!(s.try_read().is_none());
    let info = p.output_info(&name("/sub")).unwrap();
    assert_eq!(info.direction, Direction::Output);
    assert_eq!(info.status, ChannelStatus::Active);
    assert_eq!(info.packet_priority(), PriorityClass::Normal);
}

#[test]
fn fresh_channel_defaults() {
    let ns = server();
    let p = open(&ns, "/p");
    let _s = open(&ns, "/s");
    p.connect(&name("/s"), CarrierId::Tcp).unwrap();
    let info = p.channel_info(&name("/s")).unwrap();
    assert_eq!(info.counters.sent, 0);
    assert_eq!(info.counters.received, 0);
    assert_eq!(info.counters.dropped, 0);
    assert_eq!(info.packet_priority(), PriorityClass::Normal);
    assert_eq!(info.queue_capacity, 64);
}

#[test]
fn two_subscribers_on_different_carriers() {
    let ns = server();
    let p = open(&ns, "/publisher1");
    let s1 = open(&ns, "/subscriber1");
    let s2 = open(&ns, "/subscriber2");
    p.connect(&name("/subscriber1"), CarrierId::Tcp).unwrap();
    p.connect(&name("/subscriber2"), CarrierId::Udp).unwrap();
    let outs: Vec<_> = p
        .channels()
        .into_iter()
        .filter(|c| c.direction == Direction::Output)
        .collect();
    assert_eq!(outs.len(), 2);
    p.publish_bytes(&b"hello"[..]);
    assert_eq!(
        &s1.read_timeout(WAIT).unwrap().message.payload[..],
        b"hello"
    );
    assert_eq!(
        &s2.read_timeout(WAIT).unwrap().message.payload[..],
        b"hello"
    );
}

#[test]
fn acked_probes_count_sent_and_acks() {
    let ns = server();
    let p = open(&ns, "/probe");
    let _s = open(&ns, "/sink");
    p.connect(&name("/sink"), CarrierId::Tcp).unwrap();
    for _ in 0..5 {
        p.publish_acked(Message::new(vec![0u8; 64]));
        let ack = p.recv_ack(&name("/sink"), WAIT).unwrap().expect("ack");
        assert!(ack.ack_ns >= ack.send_ns);
    }
    let info = p.channel_info(&name("/sink")).unwrap();
    assert_eq!(info.counters.sent, 5);
    assert_eq!(info.counters.acks, 5);
}

#[test]
fn lookup_failure_and_disconnect_lifecycle() {
    let ns = server();
    let p = open(&ns, "/a");
    let s = open(&ns, "/b");
    assert!(matches!(
        p.connect(&name("/nobody"), CarrierId::Tcp),
        Err(PortError::Lookup(_))
    ));
    p.connect(&name("/b"), CarrierId::Tcp).unwrap();
    assert!(wait_until(|| s.input_info(&name("/a")).is_ok()));
    p.disconnect(&name("/b")).unwrap();
    assert!(p.channel_info(&name("/b")).is_err());
    assert!(wait_until(|| s.input_info(&name("/a")).is_err()));
    assert!(matches!(
        p.disconnect(&name("/b")),
        Err(PortError::NoSuchChannel)
    ));
    assert_eq!(p.retired_channels().len(), 1);
}

#[test]
fn read_on_empty_port() {
    let ns = server();
    let s = open(&ns, "/empty");
    assert!(s.read(false, None).unwrap().is_none());
    assert!(matches!(
        s.read_timeout(Duration::from_millis(20)),
        Err(PortError::Timeout)
    ));
    assert!(p_publish_without_outputs(&ns).is_empty());
}

fn p_publish_without_outputs(ns: &NameServer) -> Vec<(PortName, EnqueueOutcome)> {
    open(ns, "/lonely").publish_bytes(&b"x"[..])
}

#[test]
fn connection_survives_nameserver_shutdown() {
    let ns = server();
    let p = open(&ns, "/p1");
    let s = open(&ns, "/s1");
    let ep = NameClient::new(ns.local_addr())
        .lookup(&name("/s1"))
        .unwrap();
    ns.shutdown();
    p.connect_endpoint(&name("/s1"), &ep, CarrierId::Tcp)
        .unwrap();
    p.publish_bytes(&b"still here"[..]);
    assert_eq!(
        &s.read_timeout(WAIT).unwrap().message.payload[..],
        b"still here"
    );
}

#[test]
fn stalled_emu_channel_drops_oldest() {
    let ns = server();
    let net = emu_network();
    let p = Port::open(
        name("/ep"),
        config(ns.local_addr()).with_emu(net.clone(), "a"),
    )
    .unwrap();
    let _s = Port::open(
        name("/es"),
        config(ns.local_addr()).with_emu(net.clone(), "b"),
    )
    .unwrap();
    p.connect(&name("/es"), CarrierId::Emu).unwrap();
    net.set_blocked("a", "b", true);
    for i in 0..65u32 {
        p.publish_bytes(i.to_be_bytes().to_vec());
    }
    let info = p.channel_info(&name("/es")).unwrap();
    assert_eq!(info.counters.dropped, 1);
    assert_eq!(info.queued, 64);
    net.set_blocked("a", "b", false);
}

#[test]
fn stalled_emu_publish_is_fast() {
    let ns = server();
    let net = emu_network();
    let p = Port::open(
        name("/fp"),
        config(ns.local_addr()).with_emu(net.clone(), "a"),
    )
    .unwrap();
    let _s = Port::open(
        name("/fs"),
        config(ns.local_addr()).with_emu(net.clone(), "b"),
    )
    .unwrap();
    p.connect(&name("/fs"), CarrierId::Emu).unwrap();
    net.set_blocked("a", "b", true);
    let mut durations: Vec<Duration> = (0..1000)
        .map(|_| {
            let t = Instant::now();
            p.publish_bytes(vec![0u8; 512]);
            t.elapsed()
        })
        .collect();
    durations.sort();
    assert!(
        durations[500] < Duration::from_millis(1),
        "median {:?}",
        durations[500]
    );
    let c = p.channel_info(&name("/fs")).unwrap();
    assert_eq!(
        c.counters.enqueued,
        c.counters.sent + c.counters.dropped + c.queued as u64 + c.counters.in_flight
    );
}

#[test]
fn stalled_sibling_does_not_block_delivery() {
    let ns = server();
    let net = emu_network();
    let p = Port::open(
        name("/hub"),
        config(ns.local_addr())
            .with_emu(net.clone(), "a")
            .with_queue_capacity(256),
    )
    .unwrap();
    let _slow = Port::open(
        name("/slow"),
        config(ns.local_addr()).with_emu(net.clone(), "b"),
    )
    .unwrap();
    let fast = Port::open(
        name("/fast"),
        config(ns.local_addr()).with_emu(net.clone(), "c"),
    )
    .unwrap();
    p.connect(&name("/slow"), CarrierId::Emu).unwrap();
    p.connect(&name("/fast"), CarrierId::Emu).unwrap();
    net.set_blocked("a", "b", true);
    for i in 0..200u32 {
        p.publish_bytes(i.to_be_bytes().to_vec());
    }
    for i in 0..200u32 {
        let m = fast.read_timeout(WAIT).unwrap();
        assert_eq!(&m.message.payload[..], &i.to_be_bytes());
    }
    net.set_blocked("a", "b", false);
}

#[test]
fn admin_session_sets_and_reports_qos() {
    let ns = server();
    let p = open(&ns, "/publisher1");
    let _s = open(&ns, "/subscriber1");
    p.connect(&name("/subscriber1"), CarrierId::Tcp).unwrap();
    let mut admin = AdminClient::connect_by_name(
        &NameClient::new(ns.local_addr()),
        &name("/publisher1"),
        &name("/admin"),
    )
    .unwrap();
    assert_eq!(
        admin
            .request("prop set /subscriber1 (qos ((priority HIGH)))")
            .unwrap(),
        "ok"
    );
    assert_eq!(
        p.channel_info(&name("/subscriber1"))
            .unwrap()
            .packet_priority(),
        PriorityClass::High
    );
    let get = admin.request("prop get /subscriber1").unwrap();
    assert!(get.contains("(qos ((priority HIGH) (dscp AF42)))"), "{get}");
    let degraded = admin
        .request("prop set /subscriber1 (sched ((policy SCHED_FIFO) (priority 30)))")
        .unwrap();
    assert_eq!(degraded, "ok (degraded \"permission\")");
    let get = admin.request("prop get /subscriber1").unwrap();
    assert!(get.contains("(applied false)"), "{get}");
    assert_eq!(
        admin.request("prop get /nobody").unwrap(),
        "err no-such-channel"
    );
    assert!(admin
        .request("prop set /subscriber1 (qos")
        .unwrap()
        .starts_with("err syntax-error"));
}

#[test]
fn admin_connect_and_list() {
    let ns = server();
    let p = open(&ns, "/x");
    let _s = open(&ns, "/y");
    assert_eq!(p.handle_admin("connect /y udp"), "ok");
    assert_eq!(p.handle_admin("list"), "ok (output /y udp active)");
    assert_eq!(p.handle_admin("disconnect /y"), "ok");
    assert_eq!(p.handle_admin("disconnect /y"), "err no-such-channel");
}

#[test]
fn disconnect_counts_queued_as_dropped() {
    let ns = server();
    let net = emu_network();
    let p = Port::open(
        name("/dq"),
        config(ns.local_addr()).with_emu(net.clone(), "a"),
    )
    .unwrap();
    let _s = Port::open(
        name("/ds"),
        config(ns.local_addr()).with_emu(net.clone(), "b"),
    )
    .unwrap();
    p.connect(&name("/ds"), CarrierId::Emu).unwrap();
    net.set_blocked("a", "b", true);
    for _ in 0..10 {
        p.publish_bytes(vec![1u8; 32]);
    }
    p.disconnect(&name("/ds")).unwrap();
    let retired = p.retired_channels();
    let c = &retired[0].counters;
    assert_eq!(c.enqueued, 10);
    assert_eq!(c.enqueued, c.sent + c.dropped);
    assert!(c.dropped >= 9);
}
