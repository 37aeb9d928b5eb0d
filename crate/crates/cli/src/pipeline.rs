//! Building blocks shared by the subcommands and the acceptance suite.

use std::cell::RefCell;
use std::net::TcpListener;
use std::time::{Duration, Instant};

use camc_core::compressor::{
    compression_ratio, flops_report, layer_sizes, prune_model, read_quantized, write_quantized, CompressionRatios,
    FlopsReport, PruneSpec, QuantizedModel, SizeBreakdown, SparsityReport,
};
use camc_core::mcnet::{McNet, MC_LAYERS};
use camc_core::numcore::rng::{stream, WEIGHTS};
use camc_core::numcore::{load_params, save_params, ParamSet, Role};
use camc_core::sigsynth::{load_dataset, synth_dataset, Dataset, ModType};
use camc_core::splittrain::{
    evaluate, train_offline, DeviceEnd, EvalResult, Prepared, ServerEnd, Split, TrainConfig, TrainReport,
};
use camc_core::sscnet::{SscNet, SSC_LAYERS};
use camc_core::transport::{
    bind_addr, offline_mirror, run_device, serve, Peer, ServeSummary, SessionConfig, TcpLink, Timeouts,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{headers, RunDir, Table};
use crate::config::ExperimentConfig;
use crate::stats::{max_drop, spearman};
use crate::CliError;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Dataset for `split`: the configured file if there is one, otherwise a
/// deterministic synthesis.
pub fn dataset(cfg: &ExperimentConfig, split: &str) -> Result<Dataset, CliError> {
    let path = match split {
        "train" => &cfg.data.train,
        "val" => &cfg.data.val,
        "test" => &cfg.data.test,
        other => return Err(CliError::Config(format!("unknown split {other:?}"))),
    };
    let ds = match path {
        Some(p) => load_dataset(p)?,
        None => synth_split(cfg, split)?,
    };
    check_dataset(cfg, &ds)?;
    Ok(ds)
}

pub fn synth_split(cfg: &ExperimentConfig, split: &str) -> Result<Dataset, CliError> {
    let per_class = match split {
        "train" => cfg.data.train_per_class,
        "val" => cfg.data.val_per_class,
        _ => cfg.data.test_per_class,
    };
    let t = Instant::now();
    let ds = synth_dataset(&cfg.synth_spec(split, per_class, &cfg.data.snr_db)?)?;
    log::info!("synthesized {split}: {} frames in {:.1}s", ds.len(), t.elapsed().as_secs_f64());
    Ok(ds)
}

/// A loaded corpus must carry the configured frame length and classes.
fn check_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(), CliError> {
    ds.expect_len(cfg.data.frame_len).map_err(|e| CliError::Config(e.to_string()))?;
    let want = cfg.mods()?;
    let have: Vec<Option<ModType>> = ds.labels.iter().map(|l| l.parse().ok()).collect();
    if have.len() != want.len() || have.iter().zip(&want).any(|(h, w)| *h != Some(*w)) {
        return Err(CliError::Config(format!("dataset classes {:?} differ from config {:?}", ds.labels, cfg.data.mods)));
    }
    Ok(())
}

pub struct Splits {
    pub train: Prepared,
    pub val: Prepared,
    pub test: Prepared,
}

impl Splits {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        Ok(Splits {
            train: Prepared::from_dataset(&dataset(cfg, "train")?),
            val: Prepared::from_dataset(&dataset(cfg, "val")?),
            test: Prepared::from_dataset(&dataset(cfg, "test")?),
        })
    }
}

/// Freshly initialized ends.
pub fn build_ends(cfg: &ExperimentConfig) -> Result<(DeviceEnd<f32>, ServerEnd<f32>), CliError> {
    let mut rng = stream(cfg.derive_seed("init"), WEIGHTS);
    let enc = SscNet::build(cfg.ssc(), &mut rng)?;
    let cls = McNet::build(cfg.mc(), &mut rng)?;
    Ok(ends_from(cfg, enc, cls))
}

pub fn ends_from(cfg: &ExperimentConfig, enc: SscNet<f32>, cls: McNet<f32>) -> (DeviceEnd<f32>, ServerEnd<f32>) {
    let seed = cfg.derive_seed("dropout");
    (DeviceEnd::new(enc, cfg.optimizer(), seed), ServerEnd::new(cls, cfg.optimizer(), seed))
}

pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        link: cfg.link(),
        epochs: cfg.train.epochs,
        patience: cfg.train.patience,
        seed: cfg.derive_seed("train"),
        first_epoch: 0,
    }
}

pub fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.derive_seed("eval")
}

/// Saved with the `last` checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub resume_hash: String,
    /// Epochs completed so far.
    pub next_epoch: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

pub struct Trained {
    pub device: DeviceEnd<f32>,
    pub server: ServerEnd<f32>,
    pub report: TrainReport,
}

fn save_last(run: &RunDir, device: &DeviceEnd<f32>, server: &ServerEnd<f32>, state: &ResumeState) -> Result<(), CliError> {
    for (name, ps) in [
        ("device", &device.net.params),
        ("server", &server.net.params),
        ("device_opt", &device.opt.state()),
        ("server_opt", &server.opt.state()),
    ] {
        let p = run.checkpoint("last", name);
        run.ensure(p.strip_prefix(&run.root).expect("inside run dir"))?;
        save_params(ps, &p)?;
    }
    run.write_json("checkpoints/last/state.json", state)?;
    Ok(())
}

pub fn save_ends(run: &RunDir, which: &str, device: &SscNet<f32>, server: &McNet<f32>) -> Result<(), CliError> {
    for (name, ps) in [("device", &device.params), ("server", &server.params)] {
        let p = run.checkpoint(which, name);
        run.ensure(p.strip_prefix(&run.root).expect("inside run dir"))?;
        save_params(ps, &p)?;
        run.record(&format!("checkpoints/{which}/{name}.camcw"))?;
    }
    Ok(())
}

/// Load a checkpoint pair. The run directory must belong to `cfg`.
pub fn load_ends(cfg: &ExperimentConfig, run: &RunDir, which: &str) -> Result<(SscNet<f32>, McNet<f32>), CliError> {
    let m = run.manifest()?;
    if m.config_hash != run.hash {
        return Err(CliError::Config(format!(
            "{} holds artifacts of config {}, not {}",
            run.root.display(),
            m.config_hash,
            run.hash
        )));
    }
    read_ends(cfg, run, which)
}

fn read_ends(cfg: &ExperimentConfig, run: &RunDir, which: &str) -> Result<(SscNet<f32>, McNet<f32>), CliError> {
    let dev = load_params(run.checkpoint(which, "device"))?;
    let srv = load_params(run.checkpoint(which, "server"))?;
    Ok((SscNet::from_params(cfg.ssc(), dev)?, McNet::from_params(cfg.mc(), srv)?))
}

/// Offline training. With a run directory, the `last` checkpoint and
/// optimizer state are written after every epoch, the best parameters at
/// the end, and `resume` continues from `last`.
pub fn train(cfg: &ExperimentConfig, splits: &Splits, run: Option<&RunDir>, resume: bool) -> Result<Trained, CliError> {
    let mut tc = train_config(cfg);
    let mut prior_rows: Vec<Vec<String>> = Vec::new();
    let mut prior_best: Option<(usize, f64)> = None;
    let (mut device, mut server) = match (run, resume) {
        (Some(run), true) => {
            let state_path = run.path("checkpoints/last/state.json");
            let state: ResumeState = serde_json::from_str(
                &std::fs::read_to_string(&state_path)
                    .map_err(|e| CliError::Config(format!("nothing to resume at {}: {e}", state_path.display())))?,
            )?;
            if state.resume_hash != cfg.resume_hash() {
                return Err(CliError::Config("resume checkpoint was written by a different config".into()));
            }
            if state.next_epoch >= cfg.train.epochs {
                return Err(CliError::Config(format!(
                    "run already has {} of {} epochs",
                    state.next_epoch, cfg.train.epochs
                )));
            }
            let (enc, cls) = read_ends(cfg, run, "last")?;
            let (mut d, mut s) = ends_from(cfg, enc, cls);
            d.opt.load_state(&load_params(run.checkpoint("last", "device_opt"))?)?;
            s.opt.load_state(&load_params(run.checkpoint("last", "server_opt"))?)?;
            tc.first_epoch = state.next_epoch;
            tc.epochs = cfg.train.epochs - state.next_epoch;
            prior_best = Some((state.best_epoch, state.best_val_acc));
            let log = run.path("train_log.csv");
            if log.exists() {
                let t = Table::read(&log)?;
                let ep = t.column("epoch")?;
                prior_rows = t
                    .rows
                    .into_iter()
                    .filter(|r| r[ep].parse::<usize>().is_ok_and(|e| e <= state.next_epoch))
                    .map(|mut r| {
                        r.pop();
                        r
                    })
                    .collect();
            }
            log::info!("resuming at epoch {}", state.next_epoch + 1);
            (d, s)
        }
        _ => build_ends(cfg)?,
    };

    let failure: RefCell<Option<CliError>> = RefCell::new(None);
    let rows = RefCell::new(prior_rows);
    let best_so_far = RefCell::new(prior_best.unwrap_or((0, f64::NEG_INFINITY)));
    let has_val = !splits.val.is_empty();
    let report = train_offline(&mut device, &mut server, &splits.train, &splits.val, &tc, |rec, d, s| {
        log::info!("epoch {} {:?}: loss {:.4} acc {:.4}", rec.epoch, rec.split, rec.loss, rec.acc);
        let split = match rec.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        rows.borrow_mut().push(vec![rec.epoch.to_string(), split.into(), rec.loss.to_string(), rec.acc.to_string()]);
        let end_of_epoch = rec.split == Split::Val || !has_val;
        if let (Some(run), true) = (run, end_of_epoch) {
            let mut b = best_so_far.borrow_mut();
            if rec.acc > b.1 {
                *b = (rec.epoch, rec.acc);
            }
            let state = ResumeState {
                resume_hash: cfg.resume_hash(),
                next_epoch: rec.epoch,
                best_epoch: b.0,
                best_val_acc: b.1,
            };
            if let Err(e) = save_last(run, d, s, &state) {
                failure.borrow_mut().get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    if let Some(run) = run {
        run.write_csv("train_log.csv", headers::TRAIN_LOG, &rows.into_inner())?;
        // a resumed run only replaces the best checkpoint if it improved on it
        let keep_old = prior_best.is_some_and(|(_, acc)| acc >= report.best_val_acc)
            && run.checkpoint("best", "device").exists();
        if !keep_old {
            save_ends(run, "best", &device.net, &server.net)?;
        }
        run.write_json("train_summary.json", &TrainSummary::from_report(&report, cfg))?;
    }
    if report.diverged {
        return Err(CliError::Diverged(format!("training diverged; best epoch {}", report.best_epoch)));
    }
    Ok(Trained { device, server, report })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub optimizer: String,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub diverged: bool,
    pub wall_s: f64,
}

impl TrainSummary {
    pub fn from_report(r: &TrainReport, cfg: &ExperimentConfig) -> Self {
        TrainSummary {
            config_hash: cfg.hash(),
            optimizer: r.optimizer.clone(),
            best_epoch: r.best_epoch,
            best_val_acc: r.best_val_acc,
            epochs_run: r.epochs_run,
            stopped_early: r.stopped_early,
            diverged: r.diverged,
            wall_s: r.wall_s,
        }
    }
}

pub fn eval_at(
    cfg: &ExperimentConfig,
    enc: &SscNet<f32>,
    cls: &McNet<f32>,
    data: &Prepared,
    link_snr_db: f64,
) -> Result<EvalResult, CliError> {
    Ok(evaluate(enc, cls, data, link_snr_db, eval_seed(cfg), cfg.train.batch.max(256))?)
}

/// `(snr_db, correct, total)` per sensing SNR.
pub type SnrPoint = (f64, u64, u64);

fn by_snr(ev: &EvalResult) -> Vec<SnrPoint> {
    ev.by_snr.iter().map(|&(s, c, t)| (s as f64, c, t)).collect()
}

fn sweep_set(cfg: &ExperimentConfig, tag: &str, snrs: &[f64], per_class: usize) -> Result<Prepared, CliError> {
    let spec = cfg.synth_spec(tag, per_class * snrs.len(), snrs)?;
    Ok(Prepared::from_dataset(&synth_dataset(&spec)?))
}

/// Accuracy against sensing SNR at the configured forward link SNR.
pub fn snr_sweep(cfg: &ExperimentConfig, enc: &SscNet<f32>, cls: &McNet<f32>) -> Result<Vec<SnrPoint>, CliError> {
    let data = sweep_set(cfg, "sweep-snr", &cfg.sweep.sensing_snr_db, cfg.sweep.per_class)?;
    Ok(by_snr(&eval_at(cfg, enc, cls, &data, cfg.link.fwd_snr_db)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub sensing_snr_db: f64,
    pub link_snr_db: f64,
    pub correct: u64,
    pub total: u64,
}

impl GridPoint {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub config_hash: String,
    pub rank_corr_sensing: f64,
    pub rank_corr_link: f64,
}

/// Accuracy over the (sensing SNR × link SNR) grid.
pub fn snr_grid(cfg: &ExperimentConfig, enc: &SscNet<f32>, cls: &McNet<f32>) -> Result<Vec<GridPoint>, CliError> {
    let s = &cfg.sweep;
    let data = sweep_set(cfg, "sweep-grid", &s.grid_sensing_snr_db, s.grid_per_class)?;
    let mut out = Vec::new();
    for &link in &s.grid_link_snr_db {
        for (snr, correct, total) in by_snr(&eval_at(cfg, enc, cls, &data, link)?) {
            out.push(GridPoint { sensing_snr_db: snr, link_snr_db: link, correct, total });
        }
    }
    Ok(out)
}

/// Spearman correlation of accuracy with sensing SNR and with link SNR.
/// An infinite link SNR ranks above every finite one.
pub fn grid_correlations(grid: &[GridPoint]) -> (f64, f64) {
    let acc: Vec<f64> = grid.iter().map(GridPoint::accuracy).collect();
    let sens: Vec<f64> = grid.iter().map(|g| g.sensing_snr_db).collect();
    let link: Vec<f64> = grid.iter().map(|g| g.link_snr_db).collect();
    (spearman(&sens, &acc), spearman(&link, &acc))
}

/// Largest accuracy drop along increasing sensing SNR, in percentage points.
pub fn snr_drop_points(points: &[SnrPoint]) -> f64 {
    let acc: Vec<f64> = points.iter().map(|&(_, c, t)| 100.0 * c as f64 / t.max(1) as f64).collect();
    max_drop(&acc)
}

pub fn prune_spec(cfg: &ExperimentConfig) -> PruneSpec {
    PruneSpec::split(cfg.compress.rho_device, cfg.compress.rho_server)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioReport {
    pub bits: u8,
    pub rho_device: f64,
    pub rho_server: f64,
    /// Analytic `γ` from weight counts and ratios.
    pub gamma_device: f64,
    pub gamma_server: f64,
    pub gamma_total: f64,
    /// `(32/b)·P/(P_kept + P_side)` over every encoder parameter, side
    /// tensors counted like weights.
    pub count_ratio_device: f64,
    /// Dense `f32` weight bytes against the serialized codes.
    pub code_ratio_device: f64,
    /// Size of the dense encoder checkpoint against its quantized file.
    pub file_ratio_device: f64,
    pub device_sizes: SizeBreakdown,
    pub server_sizes: SizeBreakdown,
    pub device_file_bytes: usize,
    pub device_dense_file_bytes: usize,
    pub server_file_bytes: usize,
    pub server_dense_file_bytes: usize,
}

fn dense_file_len(ps: &ParamSet<f32>) -> Result<usize, CliError> {
    let mut buf = Vec::new();
    camc_core::numcore::write_params(ps, &mut buf)?;
    Ok(buf.len())
}

fn kept_and_side(ps: &ParamSet<f32>) -> (usize, usize) {
    let mut kept = 0;
    let mut side = 0;
    for p in ps.iter() {
        if p.role == Role::Weight {
            kept += p.mask.as_ref().map_or(p.value.numel(), |m| m.iter().filter(|&&k| k).count());
        } else {
            side += p.value.numel();
        }
    }
    (kept, side)
}

pub struct Compressed {
    pub spec: PruneSpec,
    pub sparsity: SparsityReport,
    pub finetune: Option<TrainReport>,
    /// Pruned (and fine-tuned) float models.
    pub pruned: (SscNet<f32>, McNet<f32>),
    pub quantized: (QuantizedModel, QuantizedModel),
    /// Serialized quantized files.
    pub files: (Vec<u8>, Vec<u8>),
    /// Models reloaded from `files`.
    pub restored: (SscNet<f32>, McNet<f32>),
    pub ratios: RatioReport,
    pub flops: FlopsReport,
}

/// Prune at the configured ratios, fine-tune with masks held, quantize,
/// serialize and reload.
pub fn compress(
    cfg: &ExperimentConfig,
    enc: &SscNet<f32>,
    cls: &McNet<f32>,
    splits: &Splits,
) -> Result<Compressed, CliError> {
    let c = &cfg.compress;
    let spec = prune_spec(cfg);
    let (mut enc, mut cls) = (enc.clone(), cls.clone());
    let sparsity = prune_model(&mut enc, &mut cls, &spec)?;
    let finetune = if c.finetune_epochs > 0 {
        let (mut d, mut s) = ends_from(cfg, enc, cls);
        let tc = TrainConfig { epochs: c.finetune_epochs, seed: cfg.derive_seed("finetune"), ..train_config(cfg) };
        let r = train_offline(&mut d, &mut s, &splits.train, &splits.val, &tc, |_, _, _| {})?;
        if r.diverged {
            return Err(CliError::Diverged("fine-tuning diverged".into()));
        }
        enc = d.net;
        cls = s.net;
        Some(r)
    } else {
        None
    };
    let qd = QuantizedModel::quantize(&enc.params, c.bits)?;
    let qs = QuantizedModel::quantize(&cls.params, c.bits)?;
    let (mut fd, mut fs) = (Vec::new(), Vec::new());
    write_quantized(&qd, &mut fd)?;
    write_quantized(&qs, &mut fs)?;
    let rd = read_quantized(fd.as_slice())?;
    let rs = read_quantized(fs.as_slice())?;
    let restored = (SscNet::from_params(cfg.ssc(), rd.to_params()?)?, McNet::from_params(cfg.mc(), rs.to_params()?)?);

    let gamma: CompressionRatios =
        compression_ratio(&layer_sizes(&enc.params, &SSC_LAYERS), &layer_sizes(&cls.params, &MC_LAYERS), &spec, c.bits);
    let (kept, side) = kept_and_side(&enc.params);
    let (dsz, ssz) = (qd.sizes(), qs.sizes());
    let dense_d = dense_file_len(&enc.params)?;
    let dense_s = dense_file_len(&cls.params)?;
    let ratios = RatioReport {
        bits: c.bits,
        rho_device: c.rho_device,
        rho_server: c.rho_server,
        gamma_device: gamma.device,
        gamma_server: gamma.server,
        gamma_total: gamma.total,
        count_ratio_device: 32.0 / c.bits as f64 * enc.params.count_total() as f64 / (kept + side) as f64,
        code_ratio_device: dsz.code_ratio(),
        file_ratio_device: dense_d as f64 / fd.len() as f64,
        device_sizes: dsz,
        server_sizes: ssz,
        device_file_bytes: fd.len(),
        device_dense_file_bytes: dense_d,
        server_file_bytes: fs.len(),
        server_dense_file_bytes: dense_s,
    };
    let flops = flops_report(&cfg.ssc(), &cfg.mc(), &spec, c.lambda)?;
    Ok(Compressed {
        spec,
        sparsity,
        finetune,
        pruned: (enc, cls),
        quantized: (qd, qs),
        files: (fd, fs),
        restored,
        ratios,
        flops,
    })
}

/// Fixed frames for comparing quantized and float predictions.
pub fn agreement_set(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let m = cfg.data.mods.len();
    let per_class = cfg.compress.agreement_frames.div_ceil(m);
    let spec = cfg.synth_spec("agreement", per_class, &cfg.data.snr_db)?;
    let mut ds = synth_dataset(&spec)?;
    ds.records.truncate(cfg.compress.agreement_frames);
    Ok(Prepared::from_dataset(&ds))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agreement {
    pub frames: usize,
    pub top1_agreement: f64,
    pub float_accuracy: f64,
    pub quantized_accuracy: f64,
}

/// Top-1 agreement of two model pairs, noise-free link.
pub fn agreement(
    cfg: &ExperimentConfig,
    a: (&SscNet<f32>, &McNet<f32>),
    b: (&SscNet<f32>, &McNet<f32>),
    data: &Prepared,
) -> Result<Agreement, CliError> {
    let ea = eval_at(cfg, a.0, a.1, data, f64::INFINITY)?;
    let eb = eval_at(cfg, b.0, b.1, data, f64::INFINITY)?;
    let same = ea.predictions.iter().zip(&eb.predictions).filter(|(x, y)| x == y).count();
    Ok(Agreement {
        frames: data.len(),
        top1_agreement: same as f64 / data.len().max(1) as f64,
        float_accuracy: ea.accuracy,
        quantized_accuracy: eb.accuracy,
    })
}

/// The three pruning settings: encoder only, classifier only, both.
pub const PRUNE_SETTINGS: [&str; 3] = ["sscnet", "mcnet", "camc"];

/// Test accuracy against ρ for each setting, without fine-tuning.
pub fn prune_sweep(
    cfg: &ExperimentConfig,
    enc: &SscNet<f32>,
    cls: &McNet<f32>,
    test: &Prepared,
) -> Result<Vec<(String, f64, f64)>, CliError> {
    let mut out = Vec::new();
    for setting in PRUNE_SETTINGS {
        for &rho in &cfg.compress.rhos {
            let spec = match setting {
                "sscnet" => PruneSpec::split(rho, 0.0),
                "mcnet" => PruneSpec::split(0.0, rho),
                _ => PruneSpec::split(rho, rho),
            };
            let (mut e, mut c) = (enc.clone(), cls.clone());
            prune_model(&mut e, &mut c, &spec)?;
            let acc = eval_at(cfg, &e, &c, test, cfg.link.fwd_snr_db)?.accuracy;
            log::info!("prune {setting} rho {rho}: acc {acc:.4}");
            out.push((setting.to_string(), rho, acc));
        }
    }
    Ok(out)
}

pub fn session_config(cfg: &ExperimentConfig) -> SessionConfig {
    SessionConfig {
        embed_dim: cfg.model.embed_dim,
        num_classes: cfg.data.mods.len(),
        batch: cfg.train.batch,
        noise: cfg.link(),
        seed: cfg.derive_seed("online"),
    }
}

pub fn server_addr(cfg: &ExperimentConfig) -> String {
    cfg.train.bind.clone().unwrap_or_else(bind_addr)
}

/// Accept one device and train the classifier until it says goodbye.
pub fn online_server(
    cfg: &ExperimentConfig,
    listener: &TcpListener,
    mut server: ServerEnd<f32>,
) -> Result<(ServerEnd<f32>, ServeSummary), CliError> {
    let link = TcpLink::accept(listener)?;
    let mut peer = Peer::accept(link, session_config(cfg), Timeouts::default())?;
    let summary = serve(&mut peer, &mut server, |step, s| {
        if step % 50 == 0 {
            log::info!("server step {step}: loss {:.4}", s.loss);
        }
    })?;
    Ok((server, summary))
}

/// Connect to `addr`, retrying while the server is not up yet, and run the
/// device side of online training.
pub fn online_device(
    cfg: &ExperimentConfig,
    addr: &str,
    mut device: DeviceEnd<f32>,
    train: &Prepared,
) -> Result<(DeviceEnd<f32>, u64), CliError> {
    let deadline = Instant::now() + Duration::from_secs(10);
    let link = loop {
        match TcpLink::connect(addr) {
            Ok(l) => break l,
            Err(e) if Instant::now() < deadline => {
                log::debug!("connect {addr}: {e}; retrying");
                std::thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(e.into()),
        }
    };
    let mut peer = Peer::connect(link, session_config(cfg), Timeouts::default())?;
    let s = run_device(&mut peer, &mut device, train, cfg.train.epochs, 0, cfg.train.online_steps)?;
    Ok((device, s.steps))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MirrorCheck {
    pub steps: usize,
    pub offline_losses: Vec<f64>,
    pub max_loss_rel_diff: f64,
    pub max_param_rel_diff: f64,
}

pub struct OnlineRun {
    pub device: DeviceEnd<f32>,
    pub server: ServerEnd<f32>,
    pub device_steps: u64,
    pub summary: ServeSummary,
    pub mirror: Option<MirrorCheck>,
}

fn rel(a: f64, b: f64) -> f64 {
    let d = a.abs().max(b.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - b).abs() / d
    }
}

/// Both roles in one process over loopback TCP. With `mirror`, the same
/// steps are replayed in process from the same initialization and the
/// trajectories compared.
pub fn online_both(cfg: &ExperimentConfig, train: &Prepared, listener: TcpListener, mirror: bool) -> Result<OnlineRun, CliError> {
    let addr = listener.local_addr()?.to_string();
    let (device, server) = build_ends(cfg)?;
    let reference = mirror.then(|| (device.net.clone(), server.net.clone()));
    let scfg = cfg.clone();
    let handle = std::thread::spawn(move || online_server(&scfg, &listener, server));
    let dev = online_device(cfg, &addr, device, train);
    let srv = handle.join().map_err(|_| CliError::Other("server thread panicked".into()))?;
    let (device, device_steps) = dev?;
    let (server, summary) = srv?;
    let mirror = match reference {
        None => None,
        Some((enc, cls)) => {
            let (mut d, mut s) = ends_from(cfg, enc, cls);
            let losses = offline_mirror(
                &mut d,
                &mut s,
                train,
                &session_config(cfg),
                cfg.train.epochs,
                0,
                cfg.train.online_steps,
            )?;
            let max_loss = losses.iter().zip(&summary.losses).map(|(&a, &b)| rel(a, b)).fold(0.0, f64::max);
            let max_param =
                d.net.params.max_rel_diff(&device.net.params).max(s.net.params.max_rel_diff(&server.net.params));
            let len_ok = losses.len() == summary.losses.len();
            Some(MirrorCheck {
                steps: losses.len(),
                offline_losses: losses,
                max_loss_rel_diff: if len_ok { max_loss } else { f64::INFINITY },
                max_param_rel_diff: max_param,
            })
        }
    };
    Ok(OnlineRun { device, server, device_steps, summary, mirror })
}

/// Refuse to mix artifacts of different configs.
pub fn check_hashes(tables: &[(&str, &Table)], expected: &str) -> Result<(), CliError> {
    for (name, t) in tables {
        for h in t.hashes()? {
            if h != expected {
                return Err(CliError::Config(format!("{name} was produced by config {h}, not {expected}")));
            }
        }
    }
    Ok(())
}
