use std::f64::consts::PI;

use camc_core::numcore::rng::stream;
use camc_core::sigsynth::*;
use num_complex::Complex64;
use proptest::prelude::*;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[test]
fn bpsk_identity_pulse() {
    let s = modulate_symbols(ModType::Bpsk, &[0, 1, 0], 1).unwrap();
    assert_eq!(s, vec![c(1.0, 0.0), c(-1.0, 0.0), c(1.0, 0.0)]);
}

#[test]
fn qpsk_gray_phases() {
    let pts = ModType::Qpsk.constellation().unwrap();
    let phases: Vec<f64> = pts.iter().map(|p| p.arg()).collect();
    let expect = [PI / 4.0, 3.0 * PI / 4.0, -PI / 4.0, -3.0 * PI / 4.0];
    for (got, want) in phases.iter().zip(expect) {
        assert!((got - want).abs() < 1e-12, "{phases:?}");
    }
    // Gray: neighbours in phase differ in one bit
    for b in 0..4usize {
        for o in 0..4usize {
            let d = (pts[b] - pts[o]).norm();
            if (d - 2f64.sqrt()).abs() < 1e-9 {
                assert_eq!((b ^ o).count_ones(), 1);
            }
        }
    }
}

#[test]
fn constellation_energy_is_unit() {
    for m in ModType::ALL.into_iter().filter(|m| m.has_constellation()) {
        let pts = m.constellation().unwrap();
        assert_eq!(pts.len(), m.order());
        let e = pts.iter().map(|p| p.norm_sqr()).sum::<f64>() / pts.len() as f64;
        assert!((e - 1.0).abs() < 1e-6, "{m}: {e}");
    }
    // 16QAM corner is (3+3j)/√10
    let q = ModType::Qam16.constellation().unwrap();
    let peak = q.iter().map(|p| p.norm_sqr()).fold(0.0, f64::max);
    assert!((peak - 18.0 / 10.0).abs() < 1e-12);
}

#[test]
fn every_type_synthesizes_unit_power_frames() {
    let mut rng = stream(1, "synth-test");
    for m in ModType::ALL {
        for pulse in [Pulse::Rect, Pulse::RootRaisedCosine(0.35)] {
            let opts = SynthOptions { sps: 4, pulse, ..SynthOptions::default() };
            let f = synthesize(m, 128, &opts, &mut rng).unwrap();
            assert_eq!(f.samples.len(), 128);
            let p = f.samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / 128.0;
            assert!((p - 1.0).abs() < 1e-2, "{m} {pulse:?}: {p}");
            assert!(f.samples.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
        }
    }
}

#[test]
fn digital_length_must_be_multiple_of_sps() {
    let mut rng = stream(1, "x");
    let opts = SynthOptions { sps: 3, ..SynthOptions::default() };
    assert!(synthesize(ModType::Qpsk, 128, &opts, &mut rng).is_err());
    // analog types ignore symbol alignment
    assert!(synthesize(ModType::Wbfm, 128, &opts, &mut rng).is_ok());
}

#[test]
fn identity_and_pi_rotation_channels() {
    let mut rng = stream(2, "ch");
    let s = synthesize(ModType::Qam16, 64, &SynthOptions::default(), &mut rng).unwrap().samples;
    let out = apply_channel(&s, &ChannelSpec::awgn(f64::INFINITY), &mut rng).unwrap();
    assert_eq!(out, s);
    let spec = ChannelSpec { theta: PI, ..ChannelSpec::awgn(f64::INFINITY) };
    let out = apply_channel(&s, &spec, &mut rng).unwrap();
    for (o, i) in out.iter().zip(&s) {
        assert!((o + i).norm() < 1e-12);
    }
}

#[test]
fn measured_snr_matches_request() {
    let mut rng = stream(3, "snr");
    let s: Vec<Complex64> = vec![c(1.0, 0.0); 1_000_000];
    let out = apply_channel(&s, &ChannelSpec::awgn(10.0), &mut rng).unwrap();
    let noise = out.iter().zip(&s).map(|(o, i)| (o - i).norm_sqr()).sum::<f64>() / s.len() as f64;
    assert!((noise - 0.1).abs() < 0.005, "noise variance {noise}");

    for snr in [-5.0, 0.0, 7.5, 20.0] {
        let s = synthesize(ModType::Qpsk, 100_000, &SynthOptions { sps: 4, ..Default::default() }, &mut rng).unwrap().samples;
        let out = apply_channel(&s, &ChannelSpec::awgn(snr), &mut rng).unwrap();
        let ps = s.iter().map(|v| v.norm_sqr()).sum::<f64>();
        let pn = out.iter().zip(&s).map(|(o, i)| (o - i).norm_sqr()).sum::<f64>();
        let measured = 10.0 * (ps / pn).log10();
        assert!((measured - snr).abs() < 0.2, "requested {snr}, measured {measured}");
    }
}

#[test]
fn channel_rejects_bad_specs() {
    let mut rng = stream(3, "bad");
    let s = vec![c(1.0, 0.0); 4];
    assert!(apply_channel(&s, &ChannelSpec::awgn(f64::NAN), &mut rng).is_err());
    assert!(apply_channel(&s, &ChannelSpec { ts_s: 0.0, ..ChannelSpec::awgn(10.0) }, &mut rng).is_err());
    assert!(apply_channel(&[], &ChannelSpec::awgn(10.0), &mut rng).is_err());
}

#[test]
fn ap_examples() {
    let ap = to_ap(&[c(1.0, 0.0), c(0.0, 1.0), c(-1.0, -1.0), c(0.0, 0.0), c(-1.0, -0.0)]);
    assert_eq!((ap.amplitude(0), ap.phase(0)), (1.0, 0.0));
    assert_eq!(ap.amplitude(1), 1.0);
    assert!((ap.phase(1) - std::f32::consts::FRAC_PI_2).abs() < 1e-7);
    assert!((ap.amplitude(2) - 2f32.sqrt()).abs() < 1e-6);
    assert!((ap.phase(2) + 3.0 * std::f32::consts::FRAC_PI_4).abs() < 1e-6);
    assert_eq!((ap.amplitude(3), ap.phase(3)), (0.0, 0.0));
    // the negative real axis maps to +π, never −π
    assert_eq!(ap.phase(4), std::f32::consts::PI);
}

#[test]
fn noiseless_amplitude_is_exact() {
    let mut rng = stream(4, "amp");
    let s = synthesize(ModType::Qam64, 256, &SynthOptions::default(), &mut rng).unwrap().samples;
    let x = apply_channel(&s, &ChannelSpec::awgn(f64::INFINITY), &mut rng).unwrap();
    let ap = to_ap(&x);
    for (l, v) in s.iter().enumerate() {
        assert_eq!(ap.amplitude(l), (v.re as f32 as f64).hypot(v.im as f32 as f64) as f32);
    }
}

#[test]
fn high_snr_symbol_error_rate_below_one_percent() {
    for m in ModType::ALL.into_iter().filter(|m| m.has_constellation()) {
        let opts = SynthOptions { sps: 4, ..SynthOptions::default() };
        let (mut errors, mut total) = (0usize, 0usize);
        for i in 0..50 {
            let mut rng = camc_core::numcore::rng::substream(9, "ser", i);
            let f = synthesize(m, 512, &opts, &mut rng).unwrap();
            let x = apply_channel(&f.samples, &ChannelSpec::awgn(30.0), &mut rng).unwrap();
            // undo the per-frame power normalisation against the ideal alphabet
            let ideal = modulate_symbols(m, &f.symbols, opts.sps).unwrap();
            let scale = (ideal.iter().map(|v| v.norm_sqr()).sum::<f64>() / ideal.len() as f64).sqrt();
            let x: Vec<Complex64> = x.iter().map(|v| v * scale).collect();
            let decided = slice_symbols(m, &x, opts.sps).unwrap();
            errors += decided.iter().zip(&f.symbols).filter(|(a, b)| a != b).count();
            total += f.symbols.len();
        }
        let ser = errors as f64 / total as f64;
        assert!(ser < 0.01, "{m}: SER {ser}");
    }
}

#[test]
fn modulation_names_parse() {
    for m in ModType::ALL {
        assert_eq!(m.name().parse::<ModType>().unwrap(), m);
    }
    assert_eq!("QAM16".parse::<ModType>().unwrap(), ModType::Qam16);
    assert_eq!("psk8".parse::<ModType>().unwrap(), ModType::Psk8);
    assert_eq!("AM_SSB".parse::<ModType>().unwrap(), ModType::AmSsb);
    assert!("OOK".parse::<ModType>().is_err());
}

fn small_dataset() -> Dataset {
    let mut spec = SynthSpec::new(vec![ModType::Bpsk, ModType::Qpsk, ModType::Qam16], 4, 32, 10.0, 11);
    spec.snrs_db = vec![-4.0, 10.0];
    synth_dataset(&spec).unwrap()
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let ds = small_dataset();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    let back = read_dataset(bytes.as_slice()).unwrap();
    assert!(back.bit_eq(&ds));
    let mut again = Vec::new();
    write_dataset(&back, &mut again).unwrap();
    assert_eq!(bytes, again);

    let one = ds.select(&[5]);
    let mut b1 = Vec::new();
    write_dataset(&one, &mut b1).unwrap();
    let mut b2 = Vec::new();
    write_dataset(&read_dataset(b1.as_slice()).unwrap(), &mut b2).unwrap();
    assert_eq!(b1, b2);
}

#[test]
fn empty_dataset_loads() {
    let ds = Dataset::new(128, vec!["BPSK".into()]);
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    assert_eq!(bytes.len(), 8 + 4 + 4 + 8 + 1 + 4);
    let back = read_dataset(bytes.as_slice()).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.frame_len, 128);
}

#[test]
fn dataset_load_errors_are_named() {
    let ds = small_dataset();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(read_dataset(bad.as_slice()).unwrap_err().to_string(), "bad magic");

    let cut = &bytes[..bytes.len() - 5];
    assert!(read_dataset(cut).unwrap_err().to_string().starts_with("truncated payload"));

    let err = ds.expect_len(64).unwrap_err().to_string();
    assert!(err.starts_with("L mismatch"), "{err}");

    let mut extra = bytes.clone();
    extra.push(0);
    assert!(read_dataset(extra.as_slice()).is_err());
}

#[test]
fn dataset_file_layout() {
    let mut ds = Dataset::new(1, vec!["BPSK".into(), "QPSK".into()]);
    ds.push(Record { iq: vec![1.0, -0.5], label: 1, snr_db: -6 }).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    let mut expect = b"CAMCDS01".to_vec();
    expect.extend_from_slice(&1u32.to_le_bytes());
    expect.extend_from_slice(&2u32.to_le_bytes());
    expect.extend_from_slice(&1u64.to_le_bytes());
    expect.extend_from_slice(b"\x04BPSK\x04QPSK");
    expect.extend_from_slice(&1.0f32.to_le_bytes());
    expect.extend_from_slice(&(-0.5f32).to_le_bytes());
    expect.push(1);
    expect.extend_from_slice(&(-6i16).to_le_bytes());
    assert_eq!(bytes, expect);
    assert!(ds.push(Record { iq: vec![0.0; 4], label: 0, snr_db: 0 }).is_err());
    assert!(ds.push(Record { iq: vec![0.0; 2], label: 2, snr_db: 0 }).is_err());
}

#[test]
fn corpus_is_balanced_and_deterministic() {
    let a = small_dataset();
    let b = small_dataset();
    assert!(a.bit_eq(&b));
    assert_eq!(a.class_counts(), vec![4, 4, 4]);
    for class in 0..3u8 {
        let snrs: Vec<i16> = a.records.iter().filter(|r| r.label == class).map(|r| r.snr_db).collect();
        assert_eq!(snrs.iter().filter(|&&s| s == -4).count(), 2);
    }
}

proptest! {
    #[test]
    fn ap_ranges_hold(iq in proptest::collection::vec(-1e3f32..1e3, 2..64)) {
        let iq = if iq.len() % 2 == 1 { iq[..iq.len() - 1].to_vec() } else { iq };
        let ap = iq_to_ap(&iq);
        for l in 0..ap.len() {
            prop_assert!(ap.amplitude(l) >= 0.0);
            prop_assert!(ap.phase(l) > -std::f32::consts::PI && ap.phase(l) <= std::f32::consts::PI);
        }
    }

    #[test]
    fn dataset_round_trip_any_values(vals in proptest::collection::vec(any::<f32>(), 0..6), snr in any::<i16>()) {
        let mut ds = Dataset::new(1, vec!["A".into(), "B".into()]);
        for (i, pair) in vals.chunks_exact(2).enumerate() {
            ds.push(Record { iq: pair.to_vec(), label: (i % 2) as u8, snr_db: snr }).unwrap();
        }
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        prop_assert!(read_dataset(bytes.as_slice()).unwrap().bit_eq(&ds));
    }
}
