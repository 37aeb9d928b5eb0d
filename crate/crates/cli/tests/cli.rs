use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use camc_cli::artifacts::{file_sha256, headers, Table};
use camc_cli::config::ExperimentConfig;
use camc_cli::stats::{max_drop, spearman};
use camc_core::compressor::load_quantized;
use camc_core::sigsynth::load_dataset;

fn camc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_camc")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = camc(args);
    assert!(out.status.success(), "camc {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small run: 1k training frames, 1 epoch.
fn small(dir: &Path) -> Vec<String> {
    [
        format!("--out={}", dir.display()),
        "--set=data.train_per_class=250".into(),
        "--set=data.val_per_class=50".into(),
        "--set=data.test_per_class=50".into(),
        "--set=train.epochs=1".into(),
        "--set=sweep.per_class=20".into(),
        "--set=sweep.grid_per_class=10".into(),
        "--set=compress.agreement_frames=200".into(),
        "--set=compress.rhos=[0.5]".into(),
    ]
    .to_vec()
}

fn with<'a>(base: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().map(String::as_str).chain(extra.iter().copied()).collect()
}

fn header(path: PathBuf) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn full_pipeline_writes_schema_stable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path());
    let t = Instant::now();
    ok(&with(&base, &["train"]));
    assert!(t.elapsed().as_secs() < 60, "smoke training took {:?}", t.elapsed());
    ok(&with(&base, &["eval"]));
    ok(&with(&base, &["compress"]));
    ok(&with(&base, &["sweep", "--kind", "grid"]));
    ok(&with(&base, &["sweep", "--kind", "prune"]));
    let report = ok(&with(&base, &["report"]));
    assert_eq!(report.lines().count(), 4, "{report}");

    let p = |n: &str| dir.path().join(n);
    // golden headers
    assert_eq!(header(p("train_log.csv")), "epoch,split,loss,acc,config_hash");
    assert_eq!(header(p("accuracy_vs_snr.csv")), "snr_db,correct,total,accuracy,config_hash");
    assert_eq!(header(p("snr_grid.csv")), "sensing_snr_db,link_snr_db,correct,total,accuracy,config_hash");
    assert_eq!(header(p("prune_sweep.csv")), "setting,rho,accuracy,config_hash");
    assert_eq!(header(p("sparsity.csv")), "layer,weights,rho,target_zeros,zeros,zero_fraction,tie_slack,config_hash");
    assert_eq!(header(p("flops.csv")), "layer,side,kind,dims,weights,rho,flops,flops_literal,config_hash");
    assert_eq!(header(p("compression.csv")), "metric,value,config_hash");
    assert_eq!(header(p("confusion_test.csv")), "true,BPSK,QPSK,8PSK,16QAM,config_hash");
    for (file, h) in [
        ("train_log.csv", headers::TRAIN_LOG),
        ("accuracy_vs_snr.csv", headers::ACC_VS_SNR),
        ("snr_grid.csv", headers::SNR_GRID),
        ("prune_sweep.csv", headers::PRUNE_SWEEP),
    ] {
        assert_eq!(header(p(file)), h);
    }

    // one hash everywhere
    let args: Vec<&str> = with(&base, &["config"]);
    let printed = ok(&args);
    let hash = printed.lines().next().unwrap().trim_start_matches("# config_hash = ").to_string();
    for f in ["train_log.csv", "accuracy_vs_snr.csv", "snr_grid.csv", "prune_sweep.csv", "compression.csv", "confusion_test.csv"] {
        assert_eq!(Table::read(&p(f)).unwrap().hashes().unwrap(), vec![hash.clone()], "{f}");
    }

    // confusion rows sum to per-class counts (50 test frames per class)
    let conf = Table::read(&p("confusion_test.csv")).unwrap();
    for row in &conf.rows {
        let s: u64 = row[1..row.len() - 1].iter().map(|v| v.parse::<u64>().unwrap()).sum();
        assert_eq!(s, 50);
    }

    // prune sweep carries the three settings
    let sweep = Table::read(&p("prune_sweep.csv")).unwrap();
    assert_eq!(sweep.strings("setting").unwrap(), vec!["sscnet", "mcnet", "camc"]);

    // ratio report includes the analytic 13.33
    let comp = Table::read(&p("compression.csv")).unwrap();
    let metric = |name: &str| -> f64 {
        let names = comp.strings("metric").unwrap();
        comp.floats("value").unwrap()[names.iter().position(|n| n == name).unwrap()]
    };
    assert!((metric("gamma_device") - 13.33).abs() < 0.005);
    assert!(metric("top1_agreement") > 0.9);

    // the quantized checkpoint reloads
    let q = load_quantized(dir.path().join("checkpoints/compressed/device.camcq")).unwrap();
    assert!(q.to_params().unwrap().count_total() > 0);

    // reports refuse artifacts of another config
    let acc = p("accuracy_vs_snr.csv");
    let mut text = std::fs::read_to_string(&acc).unwrap();
    text.push_str("12,1,1,1,0000000000000000\n");
    std::fs::write(&acc, text).unwrap();
    assert_eq!(camc(&with(&base, &["report"])).status.code(), Some(2));
}

#[test]
fn synth_is_balanced_loadable_and_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&[&format!("--out={}", d.path().display()), "synth"]);
    }
    for split in ["train", "val", "test"] {
        let pa = a.path().join(format!("data/{split}.camcds"));
        let pb = b.path().join(format!("data/{split}.camcds"));
        assert_eq!(file_sha256(&pa).unwrap(), file_sha256(&pb).unwrap(), "{split}");
    }
    let ds = load_dataset(a.path().join("data/train.camcds")).unwrap();
    assert_eq!(ds.frame_len, 128);
    assert_eq!(ds.class_counts(), vec![5000; 4]);
}

#[test]
fn synthesized_files_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path());
    ok(&with(&base, &["synth"]));
    let data = |s: &str| format!("--set=data.{s}=\"{}\"", dir.path().join(format!("data/{s}.camcds")).display());
    let (t, v, e) = (data("train"), data("val"), data("test"));
    let out = tempfile::tempdir().unwrap();
    let base2 = small(out.path());
    ok(&with(&base2, &[&t, &v, &e, "train"]));
    // a file with other classes is a config error
    let bad = with(&base2, &[&t, "--set=data.mods=[\"BPSK\",\"QPSK\"]", "train"]);
    assert_eq!(camc(&bad).status.code(), Some(2));
}

fn train_losses(dir: &Path) -> Vec<(usize, String, f64)> {
    let t = Table::read(&dir.join("train_log.csv")).unwrap();
    let ep = t.floats("epoch").unwrap();
    let split = t.strings("split").unwrap();
    let loss = t.floats("loss").unwrap();
    ep.into_iter().zip(split).zip(loss).map(|((e, s), l)| (e as usize, s, l)).collect()
}

#[test]
fn resume_continues_the_loss_curve() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ba, bb) = (small(a.path()), small(b.path()));
    ok(&with(&ba, &["--set=train.epochs=2", "train"]));
    ok(&with(&bb, &["train"]));
    ok(&with(&bb, &["--set=train.epochs=2", "train", "--resume"]));
    let (la, lb) = (train_losses(a.path()), train_losses(b.path()));
    assert_eq!(la.len(), 4);
    assert_eq!(la.len(), lb.len());
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!((x.0, &x.1), (y.0, &y.1));
        assert!((x.2 - y.2).abs() <= 1e-3, "{x:?} vs {y:?}");
    }
    // nothing left to do is a config error
    assert_eq!(camc(&with(&bb, &["--set=train.epochs=2", "train", "--resume"])).status.code(), Some(2));
}

#[test]
fn online_run_matches_offline_replay() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path());
    let out = ok(&with(
        &base,
        &["--set=train.batch=16", "--set=train.online_steps=20", "--set=train.bind=\"127.0.0.1:0\"", "train", "--mode", "online", "--mirror"],
    ));
    assert!(out.contains("online: 20 steps"), "{out}");
    let t = Table::read(&dir.path().join("online_losses.csv")).unwrap();
    assert_eq!(t.floats("online_loss").unwrap(), t.floats("offline_loss").unwrap());
    assert!(dir.path().join("checkpoints/online/device.camcw").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path());
    assert_eq!(camc(&with(&base, &["--set=train.nonsense=1", "config"])).status.code(), Some(2));
    assert_eq!(camc(&with(&base, &["--set=data.mods=[\"BPSK\",\"FOO\"]", "synth"])).status.code(), Some(2));
    assert_eq!(camc(&with(&base, &["--set=compress.bits=1", "config"])).status.code(), Some(2));
    assert_eq!(camc(&with(&base, &["eval"])).status.code(), Some(1), "no checkpoint yet");
    // nothing listens on a fresh ephemeral port
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let bind = format!("--set=train.bind=\"127.0.0.1:{port}\"");
    let out = camc(&with(&base, &[&bind, "train", "--mode", "online", "--role", "device"]));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let out = camc(&with(&base, &["--set=train.rule=\"sgd\"", "--set=train.eta=1e30", "train"]));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_files_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(
        &path,
        "version = 1\nseed = 3\n[link]\nfwd_snr_db = inf\nbwd_snr_db = 5.0\n[train]\nmode = \"online\"\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(Some(&path), &["train.epochs=3".into(), "data.mods=[\"BPSK\",\"QPSK\"]".into()]).unwrap();
    assert_eq!(cfg.seed, 3);
    assert!(cfg.link.fwd_snr_db.is_infinite());
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.mc().num_classes, 2);
    // the canonical form round-trips, infinity included
    let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.hash(), cfg.hash());
    assert_ne!(ExperimentConfig::default().hash(), cfg.hash());
    assert_eq!(cfg.resume_hash(), ExperimentConfig { train: camc_cli::config::TrainSection { epochs: 9, ..cfg.train.clone() }, ..cfg.clone() }.resume_hash());
    assert!(ExperimentConfig::from_toml("version = 2").is_err());
    assert!(ExperimentConfig::from_toml("[model]\nunknown = 1").is_err());
    assert_ne!(cfg.derive_seed("train"), cfg.derive_seed("val"));
}

#[test]
fn rank_statistics() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    // ties share ranks; a constant side has no correlation
    assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]) - 0.8660254037844387).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    assert!(spearman(&[f64::INFINITY, 0.0, 10.0], &[3.0, 1.0, 2.0]) > 0.99);
    assert_eq!(max_drop(&[1.0, 2.0, 3.0]), 0.0);
    assert_eq!(max_drop(&[1.0, 5.0, 4.0, 2.0, 6.0]), 3.0);
}

proptest::proptest! {
    #[test]
    fn spearman_is_bounded_and_symmetric(pairs in proptest::collection::vec((-50i32..50, -50i32..50), 2..40)) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let r = spearman(&x, &y);
        proptest::prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        proptest::prop_assert!((r - spearman(&y, &x)).abs() < 1e-12);
        let inv: Vec<f64> = y.iter().map(|v| -v).collect();
        proptest::prop_assert!((r + spearman(&x, &inv)).abs() < 1e-12);
    }

    #[test]
    fn max_drop_is_zero_on_sorted_input(mut v in proptest::collection::vec(0.0f64..100.0, 1..30)) {
        v.sort_by(f64::total_cmp);
        proptest::prop_assert_eq!(max_drop(&v), 0.0);
        v.reverse();
        proptest::prop_assert!((max_drop(&v) - (v[0] - v[v.len() - 1])).abs() < 1e-12);
    }
}
