use std::net::TcpListener;
use std::path::PathBuf;

use camc_core::compressor::{load_quantized, save_quantized, FlopsReport};
use camc_core::mcnet::McNet;
use camc_core::sigsynth::save_dataset;
use camc_core::splittrain::{Confusion, EvalResult, Prepared};
use camc_core::sscnet::SscNet;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::artifacts::{headers, RunDir, Table};
use crate::config::{ExperimentConfig, TrainMode};
use crate::pipeline::{self, Splits};
use crate::plot::{line_chart, Series};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "camc", version, about = "Collaborative modulation classification experiments")]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Device,
    Server,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Snr,
    Grid,
    Prune,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved config and its hash.
    Config,
    /// Synthesize the train/val/test datasets.
    Synth,
    /// Train encoder and classifier.
    Train {
        #[arg(long, value_enum)]
        mode: Option<TrainMode>,
        #[arg(long, value_enum, default_value = "both")]
        role: RoleArg,
        /// Continue from the last epoch checkpoint.
        #[arg(long)]
        resume: bool,
        /// With `--mode online --role both`, replay the run in process and
        /// compare trajectories.
        #[arg(long)]
        mirror: bool,
    },
    /// Test-set confusion matrix and accuracy against sensing SNR.
    Eval {
        #[arg(long, default_value = "best")]
        checkpoint: String,
    },
    /// Prune, fine-tune and quantize; size, ratio and FLOPs reports.
    Compress {
        #[arg(long, default_value = "best")]
        checkpoint: String,
    },
    /// Accuracy sweeps.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long, default_value = "best")]
        checkpoint: String,
    },
    /// Render SVG plots from the CSVs in the run directory.
    Report,
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(o) = &cli.out {
        overrides.push(format!("out_dir={}", toml::Value::String(o.display().to_string())));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    ExperimentConfig::load(cli.config.as_deref(), &overrides)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    let run = RunDir::new(cfg.out_dir.clone(), cfg.hash());
    match cli.command {
        Command::Config => {
            print!("# config_hash = {}\n{}", cfg.hash(), cfg.to_toml());
            Ok(())
        }
        Command::Synth => synth(&cfg, &run),
        Command::Train { mode, role, resume, mirror } => {
            match mode.unwrap_or(cfg.train.mode) {
                TrainMode::Offline => train_offline(&cfg, &run, resume),
                TrainMode::Online => {
                    if resume {
                        return Err(CliError::Config("--resume applies to offline training".into()));
                    }
                    train_online(&cfg, &run, role, mirror)
                }
            }
        }
        Command::Eval { checkpoint } => eval(&cfg, &run, &checkpoint),
        Command::Compress { checkpoint } => compress(&cfg, &run, &checkpoint),
        Command::Sweep { kind, checkpoint } => sweep(&cfg, &run, kind, &checkpoint),
        Command::Report => report(&run),
    }
}

#[derive(Serialize)]
struct SplitManifest {
    split: String,
    frames: usize,
    class_counts: Vec<usize>,
    sha256: String,
}

fn synth(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let mut out = Vec::new();
    for split in pipeline::SPLITS {
        let ds = pipeline::synth_split(cfg, split)?;
        let path = run.dataset(split);
        run.ensure(path.strip_prefix(&run.root).expect("inside run dir"))?;
        save_dataset(&ds, &path)?;
        let rel = format!("data/{split}.camcds");
        run.record(&rel)?;
        let sha = crate::artifacts::file_sha256(&path)?;
        println!("{split}: {} frames -> {} (sha256 {})", ds.len(), path.display(), &sha[..16]);
        out.push(SplitManifest { split: split.into(), frames: ds.len(), class_counts: ds.class_counts(), sha256: sha });
    }
    run.write_json("data/splits.json", &out)?;
    Ok(())
}

fn confusion_rows(c: &Confusion) -> (String, Vec<Vec<String>>) {
    let header = format!("true,{},config_hash", c.classes.join(","));
    let rows = c
        .classes
        .iter()
        .zip(&c.counts)
        .map(|(name, row)| std::iter::once(name.clone()).chain(row.iter().map(u64::to_string)).collect())
        .collect();
    (header, rows)
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    config_hash: &'a str,
    checkpoint: &'a str,
    frames: usize,
    loss: f64,
    accuracy: f64,
}

fn write_eval(run: &RunDir, name: &str, checkpoint: &str, ev: &EvalResult) -> Result<(), CliError> {
    let (header, rows) = confusion_rows(&ev.confusion);
    run.write_csv(&format!("confusion_{name}.csv"), &header, &rows)?;
    run.write_json(
        &format!("eval_{name}.json"),
        &EvalSummary {
            config_hash: &run.hash,
            checkpoint,
            frames: ev.predictions.len(),
            loss: ev.loss,
            accuracy: ev.accuracy,
        },
    )?;
    Ok(())
}

fn train_offline(cfg: &ExperimentConfig, run: &RunDir, resume: bool) -> Result<(), CliError> {
    let splits = Splits::load(cfg)?;
    let t = pipeline::train(cfg, &splits, Some(run), resume)?;
    let ev = pipeline::eval_at(cfg, &t.device.net, &t.server.net, &splits.test, cfg.link.fwd_snr_db)?;
    write_eval(run, "test", "best", &ev)?;
    println!(
        "trained {} epochs in {:.1}s: best val acc {:.4} (epoch {}), test acc {:.4}",
        t.report.epochs_run, t.report.wall_s, t.report.best_val_acc, t.report.best_epoch, ev.accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct OnlineSummary<'a> {
    config_hash: &'a str,
    role: &'a str,
    steps: u64,
    final_loss: Option<f64>,
    mirror: Option<&'a pipeline::MirrorCheck>,
}

fn bind(cfg: &ExperimentConfig) -> Result<TcpListener, CliError> {
    let addr = pipeline::server_addr(cfg);
    TcpListener::bind(&addr).map_err(|e| CliError::Transport(format!("bind {addr}: {e}")))
}

fn train_online(cfg: &ExperimentConfig, run: &RunDir, role: RoleArg, mirror: bool) -> Result<(), CliError> {
    if mirror && role != RoleArg::Both {
        return Err(CliError::Config("--mirror needs --role both".into()));
    }
    let tail = |losses: &[f64]| losses.last().copied();
    match role {
        RoleArg::Both => {
            let train = Prepared::from_dataset(&pipeline::dataset(cfg, "train")?);
            let listener = bind(cfg)?;
            log::info!("online session on {}", listener.local_addr()?);
            let r = pipeline::online_both(cfg, &train, listener, mirror)?;
            pipeline::save_ends(run, "online", &r.device.net, &r.server.net)?;
            let rows: Vec<Vec<String>> = r
                .summary
                .losses
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let off = r.mirror.as_ref().and_then(|m| m.offline_losses.get(i)).map_or(String::new(), f64::to_string);
                    vec![(i + 1).to_string(), l.to_string(), off]
                })
                .collect();
            run.write_csv("online_losses.csv", headers::ONLINE, &rows)?;
            run.write_json(
                "online_summary.json",
                &OnlineSummary {
                    config_hash: &run.hash,
                    role: "both",
                    steps: r.device_steps,
                    final_loss: tail(&r.summary.losses),
                    mirror: r.mirror.as_ref(),
                },
            )?;
            println!("online: {} steps", r.device_steps);
            if let Some(m) = &r.mirror {
                println!(
                    "mirror: {} offline steps, max loss rel diff {:.3e}, max param rel diff {:.3e}",
                    m.steps, m.max_loss_rel_diff, m.max_param_rel_diff
                );
                if m.max_param_rel_diff > 1e-6 || m.max_loss_rel_diff > 1e-6 {
                    return Err(CliError::Other("online run does not match the in-process replay".into()));
                }
            }
            Ok(())
        }
        RoleArg::Server => {
            let (_, server) = pipeline::build_ends(cfg)?;
            let listener = bind(cfg)?;
            println!("serving on {}", listener.local_addr()?);
            let (server, summary) = pipeline::online_server(cfg, &listener, server)?;
            save_one(run, "server", &server.net.params)?;
            let rows: Vec<Vec<String>> =
                summary.losses.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string(), String::new()]).collect();
            run.write_csv("online_losses.csv", headers::ONLINE, &rows)?;
            run.write_json(
                "online_summary.json",
                &OnlineSummary {
                    config_hash: &run.hash,
                    role: "server",
                    steps: summary.steps,
                    final_loss: tail(&summary.losses),
                    mirror: None,
                },
            )?;
            println!("server: {} steps", summary.steps);
            Ok(())
        }
        RoleArg::Device => {
            let train = Prepared::from_dataset(&pipeline::dataset(cfg, "train")?);
            let (device, _) = pipeline::build_ends(cfg)?;
            let (device, steps) = pipeline::online_device(cfg, &pipeline::server_addr(cfg), device, &train)?;
            save_one(run, "device", &device.net.params)?;
            println!("device: {steps} steps");
            Ok(())
        }
    }
}

fn save_one(run: &RunDir, name: &str, ps: &camc_core::numcore::ParamSet<f32>) -> Result<(), CliError> {
    let rel = format!("checkpoints/online/{name}.camcw");
    let p = run.ensure(std::path::Path::new(&rel))?;
    camc_core::numcore::save_params(ps, p)?;
    run.record(&rel)
}

fn snr_rows(points: &[pipeline::SnrPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|&(s, c, t)| vec![s.to_string(), c.to_string(), t.to_string(), (c as f64 / t.max(1) as f64).to_string()])
        .collect()
}

fn eval(cfg: &ExperimentConfig, run: &RunDir, checkpoint: &str) -> Result<(), CliError> {
    let (enc, cls) = pipeline::load_ends(cfg, run, checkpoint)?;
    let test = Prepared::from_dataset(&pipeline::dataset(cfg, "test")?);
    let ev = pipeline::eval_at(cfg, &enc, &cls, &test, cfg.link.fwd_snr_db)?;
    write_eval(run, "test", checkpoint, &ev)?;
    let pts = pipeline::snr_sweep(cfg, &enc, &cls)?;
    run.write_csv("accuracy_vs_snr.csv", headers::ACC_VS_SNR, &snr_rows(&pts))?;
    println!("test accuracy {:.4} on {} frames", ev.accuracy, test.len());
    for (s, c, t) in &pts {
        println!("  sensing {s:>6.1} dB: {:.4}", *c as f64 / *t as f64);
    }
    println!("largest accuracy drop with rising SNR: {:.2} points", pipeline::snr_drop_points(&pts));
    Ok(())
}

fn flops_rows(f: &FlopsReport) -> Vec<Vec<String>> {
    f.to_csv().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn compress(cfg: &ExperimentConfig, run: &RunDir, checkpoint: &str) -> Result<(), CliError> {
    let (enc, cls) = pipeline::load_ends(cfg, run, checkpoint)?;
    let splits = Splits::load(cfg)?;
    let c = pipeline::compress(cfg, &enc, &cls, &splits)?;

    let sparsity: Vec<Vec<String>> =
        c.sparsity.to_csv().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    run.write_csv("sparsity.csv", headers::SPARSITY, &sparsity)?;
    run.write_csv("flops.csv", headers::FLOPS, &flops_rows(&c.flops))?;
    pipeline::save_ends(run, "pruned", &c.pruned.0, &c.pruned.1)?;
    for (side, q) in [("device", &c.quantized.0), ("server", &c.quantized.1)] {
        let p = run.quantized(side);
        run.ensure(p.strip_prefix(&run.root).expect("inside run dir"))?;
        save_quantized(q, &p)?;
        run.record(&format!("checkpoints/compressed/{side}.camcq"))?;
    }
    // evaluate what was written, not the in-memory copy
    let qd = load_quantized(run.quantized("device"))?.to_params()?;
    let qs = load_quantized(run.quantized("server"))?.to_params()?;
    let (qe, qc) = (SscNet::from_params(cfg.ssc(), qd)?, McNet::from_params(cfg.mc(), qs)?);
    let data = pipeline::agreement_set(cfg)?;
    let agree = pipeline::agreement(cfg, (&c.pruned.0, &c.pruned.1), (&qe, &qc), &data)?;
    let test_q = pipeline::eval_at(cfg, &qe, &qc, &splits.test, cfg.link.fwd_snr_db)?;

    let r = &c.ratios;
    let metrics: Vec<(&str, f64)> = vec![
        ("bits", r.bits as f64),
        ("rho_device", r.rho_device),
        ("rho_server", r.rho_server),
        ("gamma_device", r.gamma_device),
        ("gamma_server", r.gamma_server),
        ("gamma_total", r.gamma_total),
        ("count_ratio_device", r.count_ratio_device),
        ("code_ratio_device", r.code_ratio_device),
        ("file_ratio_device", r.file_ratio_device),
        ("device_file_bytes", r.device_file_bytes as f64),
        ("device_dense_file_bytes", r.device_dense_file_bytes as f64),
        ("device_header_bytes", r.device_sizes.header as f64),
        ("device_mask_bytes", r.device_sizes.masks as f64),
        ("device_code_bytes", r.device_sizes.codes as f64),
        ("device_side_bytes", r.device_sizes.side as f64),
        ("server_file_bytes", r.server_file_bytes as f64),
        ("server_dense_file_bytes", r.server_dense_file_bytes as f64),
        ("flops_device", c.flops.device()),
        ("flops_server", c.flops.server()),
        ("flops_total", c.flops.total()),
        ("agreement_frames", agree.frames as f64),
        ("top1_agreement", agree.top1_agreement),
        ("float_accuracy", agree.float_accuracy),
        ("quantized_accuracy", agree.quantized_accuracy),
        ("quantized_test_accuracy", test_q.accuracy),
    ];
    let rows: Vec<Vec<String>> = metrics.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect();
    run.write_csv("compression.csv", headers::COMPRESSION, &rows)?;
    println!(
        "rho {}/{} b={}: gamma_SSC {:.2}, gamma_MC {:.2}, count ratio {:.2}, code ratio {:.2}, file ratio {:.2}",
        r.rho_device, r.rho_server, r.bits, r.gamma_device, r.gamma_server, r.count_ratio_device, r.code_ratio_device,
        r.file_ratio_device
    );
    println!(
        "top-1 agreement {:.4} on {} frames; quantized test accuracy {:.4}",
        agree.top1_agreement, agree.frames, test_q.accuracy
    );
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, run: &RunDir, kind: SweepKind, checkpoint: &str) -> Result<(), CliError> {
    let (enc, cls) = pipeline::load_ends(cfg, run, checkpoint)?;
    match kind {
        SweepKind::Snr => {
            let pts = pipeline::snr_sweep(cfg, &enc, &cls)?;
            run.write_csv("accuracy_vs_snr.csv", headers::ACC_VS_SNR, &snr_rows(&pts))?;
            println!("largest accuracy drop with rising SNR: {:.2} points", pipeline::snr_drop_points(&pts));
        }
        SweepKind::Grid => {
            let grid = pipeline::snr_grid(cfg, &enc, &cls)?;
            let rows: Vec<Vec<String>> = grid
                .iter()
                .map(|g| {
                    vec![
                        g.sensing_snr_db.to_string(),
                        g.link_snr_db.to_string(),
                        g.correct.to_string(),
                        g.total.to_string(),
                        g.accuracy().to_string(),
                    ]
                })
                .collect();
            run.write_csv("snr_grid.csv", headers::SNR_GRID, &rows)?;
            let (rs, rl) = pipeline::grid_correlations(&grid);
            run.write_json(
                "snr_grid.json",
                &pipeline::GridSummary { config_hash: run.hash.clone(), rank_corr_sensing: rs, rank_corr_link: rl },
            )?;
            println!("rank correlation with sensing SNR {rs:.3}, with link SNR {rl:.3}");
        }
        SweepKind::Prune => {
            let test = Prepared::from_dataset(&pipeline::dataset(cfg, "test")?);
            let pts = pipeline::prune_sweep(cfg, &enc, &cls, &test)?;
            let rows: Vec<Vec<String>> =
                pts.iter().map(|(s, r, a)| vec![s.clone(), r.to_string(), a.to_string()]).collect();
            run.write_csv("prune_sweep.csv", headers::PRUNE_SWEEP, &rows)?;
            for (s, r, a) in &pts {
                println!("{s:>7} rho {r:.1}: {a:.4}");
            }
        }
    }
    Ok(())
}

fn group(t: &Table, key: &str, x: &str, y: &str) -> Result<Vec<Series>, CliError> {
    let keys = t.strings(key)?;
    let xs = t.floats(x)?;
    let ys = t.floats(y)?;
    let mut out: Vec<Series> = Vec::new();
    for ((k, x), y) in keys.into_iter().zip(xs).zip(ys) {
        match out.iter_mut().find(|s| s.label == k) {
            Some(s) => s.points.push((x, y)),
            None => out.push(Series { label: k, points: vec![(x, y)] }),
        }
    }
    Ok(out)
}

fn report(run: &RunDir) -> Result<(), CliError> {
    let manifest = run.manifest()?;
    if !manifest.artifacts.is_empty() && manifest.config_hash != run.hash {
        return Err(CliError::Config(format!(
            "run directory belongs to config {}, current config is {}",
            manifest.config_hash, run.hash
        )));
    }
    let load = |name: &str| -> Result<Option<Table>, CliError> {
        let p = run.path(name);
        if p.exists() {
            Table::read(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let tables: Vec<(&str, Option<Table>)> = ["train_log.csv", "accuracy_vs_snr.csv", "snr_grid.csv", "prune_sweep.csv"]
        .into_iter()
        .map(|n| load(n).map(|t| (n, t)))
        .collect::<Result<_, _>>()?;
    let present: Vec<(&str, &Table)> = tables.iter().filter_map(|(n, t)| t.as_ref().map(|t| (*n, t))).collect();
    if present.is_empty() {
        return Err(CliError::Other(format!("no reports in {}", run.root.display())));
    }
    pipeline::check_hashes(&present, &run.hash)?;
    std::fs::create_dir_all(run.path("plots"))?;
    let mut written = Vec::new();
    for (name, t) in &present {
        let (file, title, xl, yl, series) = match *name {
            "train_log.csv" => ("plots/train_curve.svg", "Training loss", "epoch", "loss", group(t, "split", "epoch", "loss")?),
            "accuracy_vs_snr.csv" => (
                "plots/accuracy_vs_snr.svg",
                "Accuracy versus sensing SNR",
                "sensing SNR (dB)",
                "accuracy",
                vec![Series {
                    label: "accuracy".into(),
                    points: t.floats("snr_db")?.into_iter().zip(t.floats("accuracy")?).collect(),
                }],
            ),
            "snr_grid.csv" => (
                "plots/snr_grid.svg",
                "Accuracy over sensing and link SNR",
                "sensing SNR (dB)",
                "accuracy",
                group(t, "link_snr_db", "sensing_snr_db", "accuracy")?
                    .into_iter()
                    .map(|s| Series { label: format!("link {} dB", s.label), points: s.points })
                    .collect(),
            ),
            _ => ("plots/prune_sweep.svg", "Accuracy versus pruning ratio", "rho", "accuracy", group(t, "setting", "rho", "accuracy")?),
        };
        let path = run.path(file);
        line_chart(&path, title, xl, yl, &series)?;
        run.record(file)?;
        written.push(path);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
