use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use camc_core::mcnet::{McConfig, McNet};
use camc_core::numcore::rng::stream;
use camc_core::sigsynth::{synth_dataset, ModType, SynthSpec};
use camc_core::splittrain::{DeviceEnd, LinkNoise, OptimizerConfig, Prepared, ServerEnd};
use camc_core::sscnet::{SscConfig, SscNet};
use camc_core::transport::*;

fn hex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

fn f32s(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn cfg(n: usize, m: usize, batch: usize, noise: LinkNoise) -> SessionConfig {
    SessionConfig { embed_dim: n, num_classes: m, batch, noise, seed: 42 }
}

fn fast() -> Timeouts {
    Timeouts { ack: Duration::from_millis(100), idle: Duration::from_secs(5) }
}

/// Establish a session over an in-process pipe.
fn pair(dev: SessionConfig, srv: SessionConfig, a: MemLink, b: MemLink) -> (Peer<MemLink>, Peer<MemLink>) {
    let h = thread::spawn(move || Peer::accept(b, srv, fast()).unwrap());
    let d = Peer::connect(a, dev, fast()).unwrap();
    (d, h.join().unwrap())
}

// bytes below were produced by an independent encoder (struct + zlib.crc32)
const GOLDEN_ACK: &str = "010401000000000000000000000048bea817";
const GOLDEN_EMBED: &str = "01010300000000000000080000000000803f000000c0b594db2f";
const GOLDEN_SESSION: &str = "01050000000000000000240000000200000003000000010000000000000000002440000000000000f07f2a00000000000000191051c301050000000000000000240000000200000003000000010000000000000000002440000000000000f07f2a00000000000000191051c301010100000000000000080000000000803f000000c039e215e5010401000000000000000000000048bea817010202000000000000000c00000000000000000000000000803f49946b2b0104020000000000000000000000b86c366001030100000000000000080000000000003f000080beec335f93010401000000000000000000000048bea81701060000000000000000010000000009ba8aab";

#[test]
fn golden_frames_encode_and_decode_bit_exactly() {
    assert_eq!(WireFrame::ack(1).encode(), hex(GOLDEN_ACK));
    let e = WireFrame::floats(FrameKind::Embed, 3, &[1.0, -2.0]);
    assert_eq!(e.encode(), hex(GOLDEN_EMBED));
    match WireFrame::decode(&hex(GOLDEN_EMBED)).unwrap() {
        Decoded::Frame(f, n) => {
            assert_eq!(f, e);
            assert_eq!(n, 26);
            assert_eq!(f.values().unwrap(), vec![1.0, -2.0]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn frame_size_arithmetic() {
    let f = WireFrame::floats(FrameKind::Embed, 1, &[0.0; 64]);
    assert_eq!(f.encode().len(), HEADER_LEN + 4 * 64 + CRC_LEN);
    assert_eq!(f.encode().len(), 274);
}

#[test]
fn partial_and_corrupt_buffers() {
    let bytes = hex(GOLDEN_EMBED);
    assert_eq!(WireFrame::decode(&bytes[..5]).unwrap(), Decoded::Incomplete);
    assert_eq!(WireFrame::decode(&bytes[..20]).unwrap(), Decoded::Incomplete);
    let mut bad = bytes.clone();
    bad[16] ^= 0x40;
    assert_eq!(WireFrame::decode(&bad).unwrap(), Decoded::Corrupt(26));
    let mut unknown = WireFrame::ack(0).encode();
    unknown[1] = 9;
    let n = unknown.len();
    let crc = crc32fast_hash(&unknown[..n - 4]);
    unknown[n - 4..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(WireFrame::decode(&unknown), Err(TransportError::Malformed(_))));
}

fn crc32fast_hash(b: &[u8]) -> u32 {
    // reflected CRC-32 (IEEE), bitwise
    let mut c = !0u32;
    for &x in b {
        c ^= x as u32;
        for _ in 0..8 {
            c = if c & 1 == 1 { (c >> 1) ^ 0xEDB8_8320 } else { c >> 1 };
        }
    }
    !c
}

struct Recording<L> {
    inner: L,
    log: Arc<Mutex<Vec<u8>>>,
}

impl<L: ByteLink> ByteLink for Recording<L> {
    fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.log.lock().unwrap().extend_from_slice(bytes);
        self.inner.send(bytes)
    }
    fn recv_some(&mut self, buf: &mut Vec<u8>, deadline: Instant) -> Result<bool, TransportError> {
        self.inner.recv_some(buf, deadline)
    }
}

#[test]
fn recorded_session_matches_golden_stream() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let (a, b) = mem_pair();
    let (a, b) = (Recording { inner: a, log: log.clone() }, Recording { inner: b, log: log.clone() });
    let c = cfg(2, 3, 1, LinkNoise::new(10.0, f64::INFINITY));
    let srv = thread::spawn(move || {
        let mut p = Peer::accept(b, c, fast()).unwrap();
        let (k1, v1) = p.recv_data().unwrap();
        let (k2, v2) = p.recv_data().unwrap();
        p.send_data(FrameKind::Grad, &[0.5, -0.25]).unwrap();
        assert!(p.recv_data().unwrap_err().is_done());
        (k1, v1, k2, v2)
    });
    let mut d = Peer::connect(a, c, fast()).unwrap();
    d.send_data(FrameKind::Embed, &[1.0, -2.0]).unwrap();
    d.send_data(FrameKind::Label, &[0.0, 0.0, 1.0]).unwrap();
    assert_eq!(d.recv_data().unwrap(), (FrameKind::Grad, vec![0.5, -0.25]));
    d.close(Reason::Done, "");
    let (k1, v1, k2, v2) = srv.join().unwrap();
    assert_eq!((k1, v1), (FrameKind::Embed, vec![1.0, -2.0]));
    assert_eq!((k2, v2), (FrameKind::Label, vec![0.0, 0.0, 1.0]));

    let recorded = log.lock().unwrap().clone();
    assert_eq!(recorded, hex(GOLDEN_SESSION));
    let frames = WireFrame::decode_all(&recorded).unwrap();
    let hello = c.to_payload();
    let expected = vec![
        WireFrame::new(FrameKind::Hello, 0, hello.clone()),
        WireFrame::new(FrameKind::Hello, 0, hello),
        WireFrame::new(FrameKind::Embed, 1, f32s(&[1.0, -2.0])),
        WireFrame::ack(1),
        WireFrame::new(FrameKind::Label, 2, f32s(&[0.0, 0.0, 1.0])),
        WireFrame::ack(2),
        WireFrame::new(FrameKind::Grad, 1, f32s(&[0.5, -0.25])),
        WireFrame::ack(1),
        WireFrame::new(FrameKind::Bye, 0, vec![0]),
    ];
    assert_eq!(frames, expected);
}

#[test]
fn handshake_accepts_matching_and_refuses_mismatch() {
    let c = cfg(64, 4, 8, LinkNoise::default());
    let (a, b) = mem_pair();
    let (d, s) = pair(c, c, a, b);
    assert!(d.state.established && s.state.established);
    assert_eq!((d.state.last_committed, s.state.last_committed), (0, 0));
    assert_eq!((d.state.role, s.state.role), (Role::Device, Role::Server));

    let (a, b) = mem_pair();
    let h = thread::spawn(move || Peer::accept(b, c, fast()).err().unwrap());
    let err = Peer::connect(a, cfg(32, 4, 8, LinkNoise::default()), fast()).err().unwrap();
    for e in [err, h.join().unwrap()] {
        match e {
            TransportError::Refused { reason, .. } => assert_eq!(reason.code(), "DIM_MISMATCH"),
            other => panic!("{other}"),
        }
    }

    let (a, b) = mem_pair();
    let h = thread::spawn(move || Peer::accept(b, c, fast()).err().unwrap());
    let err = Peer::connect(a, cfg(64, 4, 8, LinkNoise::new(0.0, 0.0)), fast()).err().unwrap();
    assert!(matches!(err, TransportError::Refused { reason: Reason::ConfigMismatch, .. }));
    h.join().unwrap();
}

#[test]
fn version_mismatch_is_refused() {
    let c = cfg(4, 2, 2, LinkNoise::default());
    let (a, b) = mem_pair();
    let h = thread::spawn(move || Peer::accept(b, c, fast()).err().unwrap());
    let mut ep = Endpoint::new(a);
    let mut hello = WireFrame::new(FrameKind::Hello, 0, c.to_payload());
    hello.version = 2;
    ep.send_frame(&hello).unwrap();
    match ep.recv_frame(Instant::now() + Duration::from_secs(2)).unwrap() {
        Incoming::Frame(f) => {
            assert_eq!(f.kind, FrameKind::Bye);
            assert_eq!(Reason::from_u8(f.payload[0]).code(), "VERSION_MISMATCH");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(h.join().unwrap(), TransportError::Refused { reason: Reason::VersionMismatch, .. }));
}

#[test]
fn replayed_hello_is_ignored() {
    let c = cfg(2, 2, 1, LinkNoise::default());
    let (a, b) = mem_pair();
    let (mut d, mut s) = pair(c, c, a, b);
    let before = s.state.clone();
    d.ep.send_frame(&WireFrame::new(FrameKind::Hello, 0, c.to_payload())).unwrap();
    let h = thread::spawn(move || {
        let got = s.recv_data().unwrap();
        (got, s)
    });
    d.send_data(FrameKind::Embed, &[3.0, 4.0]).unwrap();
    let ((kind, v), s) = h.join().unwrap();
    assert_eq!((kind, v), (FrameKind::Embed, vec![3.0, 4.0]));
    assert_eq!(s.state.config, before.config);
    assert_eq!(s.state.recv_seq, before.recv_seq + 1);
    assert_eq!(s.accepted, 1);
}

#[test]
fn corrupted_frames_are_retried_exactly_once() {
    let c = cfg(3, 2, 1, LinkNoise::default());
    let (mut a, mut b) = mem_pair();
    // device message 1 is the first EMBED; server message 2 is the ACK of the
    // second EMBED
    a.corrupt.insert(1);
    b.corrupt.insert(2);
    let (mut d, mut s) = pair(c, c, a, b);
    let h = thread::spawn(move || {
        let mut got = Vec::new();
        for _ in 0..3 {
            got.push(s.recv_data().unwrap().1);
        }
        (got, s.accepted)
    });
    for i in 0..3 {
        d.send_data(FrameKind::Embed, &[i as f32; 3]).unwrap();
    }
    let (got, accepted) = h.join().unwrap();
    assert_eq!(got, vec![vec![0.0; 3], vec![1.0; 3], vec![2.0; 3]]);
    assert_eq!(accepted, 3);
    // two retries on the device side
    assert_eq!(d.ep.link.sent(), 1 + 3 + 2);
}

#[test]
fn out_of_order_frame_is_rejected() {
    let c = cfg(2, 2, 1, LinkNoise::default());
    let (a, b) = mem_pair();
    let (mut d, mut s) = pair(c, c, a, b);
    let h = thread::spawn(move || {
        let r = s.recv_data();
        (r.is_err(), s.state.recv_seq, s.accepted)
    });
    d.ep.send_frame(&WireFrame::floats(FrameKind::Embed, 5, &[1.0, 1.0])).unwrap();
    match d.ep.recv_frame(Instant::now() + Duration::from_secs(2)).unwrap() {
        Incoming::Frame(f) => assert_eq!((f.kind, f.step), (FrameKind::Ack, 0)),
        other => panic!("{other:?}"),
    }
    d.close(Reason::Done, "");
    let (err, seq, accepted) = h.join().unwrap();
    assert!(err);
    assert_eq!((seq, accepted), (0, 0));
}

#[test]
fn wrong_gradient_length_is_dim_mismatch() {
    let c = cfg(4, 2, 1, LinkNoise::default());
    let (a, b) = mem_pair();
    let (mut d, mut s) = pair(c, c, a, b);
    let h = thread::spawn(move || s.send_data(FrameKind::Grad, &[1.0; 3]).err().unwrap());
    match d.recv_data().err().unwrap() {
        TransportError::Refused { reason, .. } => assert_eq!(reason.code(), "DIM_MISMATCH"),
        other => panic!("{other}"),
    }
    assert!(matches!(h.join().unwrap(), TransportError::Refused { reason: Reason::DimMismatch, .. }));
}

#[test]
fn tcp_round_trip_under_a_millisecond() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let c = cfg(256, 4, 1, LinkNoise::NOISELESS);
    let h = thread::spawn(move || {
        let mut s = Peer::accept(TcpLink::accept(&listener).unwrap(), c, Timeouts::default()).unwrap();
        let mut n = 0;
        while s.recv_data().is_ok() {
            n += 1;
        }
        n
    });
    let mut d = Peer::connect(TcpLink::connect(addr).unwrap(), c, Timeouts::default()).unwrap();
    let x: Vec<f32> = (0..256).map(|i| i as f32 * 0.5).collect();
    let mut times = Vec::new();
    for _ in 0..300 {
        let t = Instant::now();
        d.send_data(FrameKind::Embed, &x).unwrap();
        times.push(t.elapsed());
    }
    d.close(Reason::Done, "");
    assert_eq!(h.join().unwrap(), 300);
    times.sort();
    let median = times[times.len() / 2];
    assert!(median < Duration::from_millis(1), "median round trip {median:?}");
}

#[test]
fn bind_address_from_environment() {
    // the only test touching the variable
    std::env::remove_var(BIND_ENV);
    assert_eq!(bind_addr(), DEFAULT_BIND);
    std::env::set_var(BIND_ENV, "127.0.0.1:9911");
    assert_eq!(bind_addr(), "127.0.0.1:9911");
    std::env::remove_var(BIND_ENV);
}

fn tiny(seed: u64, batch: usize) -> (DeviceEnd<f32>, ServerEnd<f32>) {
    let mut r = stream(seed, "weights");
    let enc = SscNet::build(SscConfig::new(32, 8), &mut r).unwrap();
    let cls = McNet::build(McConfig { lstm_units: 8, heads: 2, head_dim: 8, dense2: 16, ..McConfig::new(8, 4) }, &mut r).unwrap();
    let opt = OptimizerConfig { batch, ..OptimizerConfig::default() };
    (DeviceEnd::new(enc, opt, seed), ServerEnd::new(cls, opt, seed))
}

fn tiny_data() -> Prepared {
    let mods = vec![ModType::Bpsk, ModType::Qpsk, ModType::Psk8, ModType::Qam16];
    Prepared::from_dataset(&synth_dataset(&SynthSpec::new(mods, 20, 32, 10.0, 3)).unwrap())
}

#[test]
fn online_matches_offline_in_process() {
    let data = tiny_data();
    let noise = LinkNoise::new(5.0, 0.0);
    let batch = 8;
    let steps = 12;

    let (mut dev, mut srv) = tiny(11, batch);
    let c = cfg(8, 4, batch, noise);
    let losses = offline_mirror(&mut dev, &mut srv, &data, &c, 10, 0, Some(steps as u64)).unwrap();
    assert_eq!(losses.len(), steps);

    let (mut odev, mut osrv) = tiny(11, batch);
    let (a, b) = mem_pair();
    let (mut d, mut s) = pair(c, c, a, b);
    let h = thread::spawn(move || {
        let sum = serve(&mut s, &mut osrv, |_, _| {}).unwrap();
        (sum, osrv, s.state.last_committed)
    });
    let ds = run_device(&mut d, &mut odev, &data, 10, 0, Some(steps as u64)).unwrap();
    let (sum, osrv, srv_committed) = h.join().unwrap();
    assert_eq!(ds.steps, steps as u64);
    assert_eq!((d.state.last_committed, srv_committed), (steps as u64, steps as u64));
    assert_eq!(sum.losses, losses);
    assert_eq!(odev.net.params.max_rel_diff(&dev.net.params), 0.0);
    assert_eq!(osrv.net.params.max_rel_diff(&srv.net.params), 0.0);
}

#[test]
fn dropped_connection_leaves_both_ends_on_the_same_step() {
    let data = tiny_data();
    let batch = 4;
    let (mut dev, mut srv) = tiny(5, batch);
    let c = cfg(8, 4, batch, LinkNoise::default());
    let (mut a, b) = mem_pair();
    // handshake + two full steps (2·4 data frames + 4 ACKs each) + 3 frames
    a.cut_after = Some(1 + 2 * (8 + 4) + 3);
    let (mut d, mut s) = pair(c, c, a, b);
    let h = thread::spawn(move || {
        let r = serve(&mut s, &mut srv, |_, _| {});
        (r.is_err(), s.state.last_committed)
    });
    let before = dev.net.params.clone();
    let r = run_device(&mut d, &mut dev, &data, 1, 0, None);
    assert!(r.is_err());
    let (srv_err, srv_committed) = h.join().unwrap();
    assert!(srv_err);
    assert_eq!(d.state.last_committed, 2);
    assert_eq!(srv_committed, 2);
    assert!(!dev.has_pending());
    assert_ne!(before, dev.net.params);
}

#[test]
fn timeout_leaves_device_parameters_untouched() {
    let (mut dev, _) = tiny(5, 2);
    let c = cfg(8, 4, 2, LinkNoise::default());
    let (a, b) = mem_pair();
    let h = thread::spawn(move || {
        let p = Peer::accept(b, c, fast()).unwrap();
        thread::sleep(Duration::from_millis(600));
        drop(p);
    });
    let mut d = Peer::connect(a, c, fast()).unwrap();
    let before = dev.net.params.clone();
    let data = tiny_data();
    let (x, labels) = data.batch(&[0, 1]);
    let mut bwd = stream(1, "b");
    let err = device_step(&mut d, &mut dev, &mut bwd, x, &labels).unwrap_err();
    assert!(matches!(err, TransportError::Timeout(_)), "{err}");
    assert_eq!(before, dev.net.params);
    assert!(!dev.has_pending());
    assert_eq!(d.state.last_committed, 0);
    h.join().unwrap();
}
