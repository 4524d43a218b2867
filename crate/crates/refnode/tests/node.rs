use std::io::Write;
use std::net::TcpStream;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use comet_core::timing::{parse_timing_log, TimingDialect};
use comet_core::TimingEvent;
use comet_refnode::apps::{self, GoodputReceiver, ReceiveLimits};
use comet_refnode::bundle::DEFAULT_MAX_PAYLOAD;
use comet_refnode::{encode_bundle, Bundle, Node, NodeConfig, NodeHandle};

fn start(eid: &str, log: Option<&Path>, no_delay: bool) -> NodeHandle {
    let mut cfg = NodeConfig::new("127.0.0.1:0", eid);
    cfg.timing_log = log.map(Path::to_path_buf);
    cfg.no_delay = no_delay;
    Node::start(cfg).unwrap()
}

fn wait_until(mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + Duration::from_secs(20);
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        thread::sleep(Duration::from_millis(10));
    }
    false
}

fn limits() -> ReceiveLimits {
    ReceiveLimits {
        start: Duration::from_secs(20),
        idle: Duration::from_secs(2),
    }
}

#[test]
fn relay_forwards_thousand_bundles_with_ordered_events() {
    let dir = tempfile::tempdir().unwrap();
    let relay_log = dir.path().join("relay.log");
    let receiver = start("dtn://receiver", None, true);
    let relay = start("dtn://relay", Some(&relay_log), true);
    relay.add_route("dtn://receiver", &receiver.addr().to_string());

    let sink = GoodputReceiver::register(&receiver.addr().to_string(), "dtn://receiver/sink").unwrap();
    let rx = thread::spawn(move || sink.run(1000, 10_000, limits()).unwrap());
    apps::send_fixed(&relay.addr().to_string(), "dtn://sender/src", "dtn://receiver/sink", 1000, 10_000).unwrap();
    let rec = rx.join().unwrap();
    assert_eq!(rec.delivered, 1000);
    assert_eq!(rec.bytes_delivered, 10_000_000);
    assert!(wait_until(|| relay.stats().forwarded == 1000));
    relay.stop().unwrap();
    receiver.stop().unwrap();

    let log = parse_timing_log(&relay_log, TimingDialect::V1, true).unwrap();
    assert!(log.discarded.is_empty(), "{:?}", log.warnings);
    let bundles = log.bundles();
    assert_eq!(bundles.len(), 1000);
    for b in &bundles {
        let times: Vec<u64> = TimingEvent::ALL
            .iter()
            .map(|e| b.get(*e).unwrap_or_else(|| panic!("{} lacks {e}", b.bundle_id)))
            .collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]), "{}", b.bundle_id);
        assert!(b.ser_ns().unwrap() + b.deser_ns().unwrap() <= b.retention_ns().unwrap());
    }
}

#[test]
fn ingress_closed_mid_stream_forwards_complete_bundles_only() {
    let receiver = start("dtn://receiver", None, true);
    let relay = start("dtn://relay", None, true);
    relay.add_route("*", &receiver.addr().to_string());
    let sink = GoodputReceiver::register(&receiver.addr().to_string(), "dtn://receiver/sink").unwrap();
    let rx = thread::spawn(move || {
        sink.run(
            10,
            100,
            ReceiveLimits {
                start: Duration::from_secs(20),
                idle: Duration::from_millis(500),
            },
        )
        .unwrap()
    });

    let mut raw = TcpStream::connect(relay.addr()).unwrap();
    for seq in 0..5 {
        let b = Bundle::new("dtn://receiver/sink", "dtn://sender/src", seq, vec![1; 100]);
        let bytes = encode_bundle(&b, DEFAULT_MAX_PAYLOAD).unwrap();
        raw.write_all(&(bytes.len() as u32).to_be_bytes()).unwrap();
        raw.write_all(&bytes).unwrap();
    }
    let b = Bundle::new("dtn://receiver/sink", "dtn://sender/src", 5, vec![1; 100]);
    let bytes = encode_bundle(&b, DEFAULT_MAX_PAYLOAD).unwrap();
    raw.write_all(&(bytes.len() as u32).to_be_bytes()).unwrap();
    raw.write_all(&bytes[..bytes.len() / 2]).unwrap();
    drop(raw);

    let rec = rx.join().unwrap();
    assert_eq!(rec.delivered, 5);
    assert!(rec.is_lossy());
    assert_eq!(relay.stats().forwarded, 5);
    relay.stop().unwrap();
    receiver.stop().unwrap();
}

fn two_nodes(no_delay: bool) -> (NodeHandle, NodeHandle) {
    let sender = start("dtn://sender", None, no_delay);
    let receiver = start("dtn://receiver", None, no_delay);
    sender.add_route("*", &receiver.addr().to_string());
    receiver.add_route("*", &sender.addr().to_string());
    (sender, receiver)
}

#[test]
fn ping_through_echo_yields_one_record_per_bundle() {
    let (sender, receiver) = two_nodes(true);
    let raddr = receiver.addr().to_string();
    thread::spawn(move || apps::echo(&raddr, "dtn://receiver/echo"));
    // The echo app registers asynchronously; bundles sent earlier are held.
    let rtts = apps::ping(
        &sender.addr().to_string(),
        "dtn://sender/ping",
        "dtn://receiver/echo",
        10,
        64,
        Duration::from_secs(10),
    )
    .unwrap()
    .records;
    assert_eq!(rtts.len(), 10);
    assert!(rtts.iter().enumerate().all(|(i, r)| r.seq == i as u64 && r.payload_size == 64 && r.rtt_ns > 0));
    sender.stop().unwrap();
    receiver.stop().unwrap();
}

#[test]
fn goodput_receiver_counts_and_flags_loss() {
    let (sender, receiver) = two_nodes(true);
    for (expected, sent) in [(100, 100), (100, 90)] {
        let sink = GoodputReceiver::register(&receiver.addr().to_string(), "dtn://receiver/sink").unwrap();
        let rx = thread::spawn(move || {
            sink.run(
                expected,
                1000,
                ReceiveLimits {
                    start: Duration::from_secs(20),
                    idle: Duration::from_millis(500),
                },
            )
            .unwrap()
        });
        apps::send_fixed(&sender.addr().to_string(), "dtn://sender/src", "dtn://receiver/sink", sent, 1000).unwrap();
        let rec = rx.join().unwrap();
        assert_eq!(rec.delivered, sent);
        assert_eq!(rec.is_lossy(), sent < expected);
        rec.check().unwrap();
    }
    sender.stop().unwrap();
    receiver.stop().unwrap();
}

#[test]
fn bundles_wait_for_registration() {
    let node = start("dtn://n", None, true);
    let addr = node.addr().to_string();
    apps::send_fixed(&addr, "dtn://n/src", "dtn://n/late", 3, 10).unwrap();
    assert!(wait_until(|| node.stats().held == 3));
    let sink = GoodputReceiver::register(&addr, "dtn://n/late").unwrap();
    let rec = sink
        .run(
            3,
            10,
            ReceiveLimits {
                start: Duration::from_secs(5),
                idle: Duration::from_secs(1),
            },
        )
        .unwrap();
    assert_eq!(rec.delivered, 3);
    node.stop().unwrap();
}

#[test]
fn unreachable_node_reports_address() {
    let gone = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let err = apps::ping(&gone, "dtn://s/p", "dtn://r/e", 1, 64, Duration::from_secs(1)).unwrap_err();
    assert!(err.to_string().contains(&gone), "{err}");
}

#[test]
fn missing_responder_fails_after_drop_budget() {
    let (sender, receiver) = two_nodes(true);
    let err = apps::ping(
        &sender.addr().to_string(),
        "dtn://sender/ping",
        "dtn://receiver/echo",
        5,
        64,
        Duration::from_millis(200),
    )
    .unwrap_err();
    assert!(matches!(err, apps::AppError::TooManyDrops { dropped: 1, count: 5 }), "{err}");
    sender.stop().unwrap();
    receiver.stop().unwrap();
}

#[test]
fn shutdown_command_stops_node() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("n.log");
    let node = start("dtn://n", Some(&log), true);
    let addr = node.addr().to_string();
    let waiter = thread::spawn(move || node.wait());
    apps::stop_node(&addr).unwrap();
    waiter.join().unwrap().unwrap();
    assert!(log.exists());
}

fn q(sorted: &[u64], p: f64) -> u64 {
    sorted[((sorted.len() - 1) as f64 * p).round() as usize]
}

#[test]
fn nagle_delays_a_subset_of_pings() {
    let mut stats = Vec::new();
    for no_delay in [false, true] {
        let (sender, receiver) = two_nodes(no_delay);
        let raddr = receiver.addr().to_string();
        thread::spawn(move || apps::echo(&raddr, "dtn://receiver/echo"));
        let mut rtts: Vec<u64> = apps::ping(
            &sender.addr().to_string(),
            "dtn://sender/ping",
            "dtn://receiver/echo",
            300,
            64,
            Duration::from_secs(10),
        )
        .unwrap()
        .records
        .iter()
        .map(|r| r.rtt_ns)
        .collect();
        rtts.sort_unstable();
        let med = q(&rtts, 0.5);
        let late = rtts.iter().filter(|&&r| r > 2 * med).count();
        eprintln!(
            "no_delay={no_delay}: median={}us q90={}us q99={}us late={late}",
            med / 1000,
            q(&rtts, 0.9) / 1000,
            q(&rtts, 0.99) / 1000
        );
        stats.push((q(&rtts, 0.99), late));
        sender.stop().unwrap();
        receiver.stop().unwrap();
    }
    let (q99_nagle, _) = stats[0];
    let (q99_nodelay, _) = stats[1];
    assert!(q99_nodelay * 2 <= q99_nagle, "{stats:?}");
}
