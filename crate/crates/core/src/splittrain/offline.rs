use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::mcnet::McNet;
use crate::nn::apply_bn_updates;
use crate::numcore::rng::{stream, substream, StreamRng, EVAL_LINK, SHUFFLE};
use crate::numcore::{Graph, Mode, Real, Tensor};
use crate::sigsynth::{iq_to_ap, Dataset};
use crate::sscnet::SscNet;

use super::ends::{argmax, count_correct};
use super::link::add_awgn;
use super::{Confusion, DeviceEnd, EpochRecord, LinkNoise, ServerEnd, SimLink, Split, TrainError, TrainReport};

/// A dataset converted once to amplitude/phase features.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub frame_len: usize,
    pub classes: Vec<String>,
    /// `[count, L, 2]` row-major.
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub snr_db: Vec<i16>,
}

impl Prepared {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut features = Vec::with_capacity(ds.len() * ds.frame_len * 2);
        for r in &ds.records {
            features.extend_from_slice(&iq_to_ap(&r.iq).data);
        }
        Prepared {
            frame_len: ds.frame_len,
            classes: ds.labels.clone(),
            features,
            labels: ds.records.iter().map(|r| r.label as usize).collect(),
            snr_db: ds.records.iter().map(|r| r.snr_db).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn batch<T: Real>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let w = self.frame_len * 2;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend(self.features[i * w..(i + 1) * w].iter().map(|&v| T::lit(v as f64)));
        }
        let x = Tensor::new(vec![idx.len(), self.frame_len, 2], data).expect("sized");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Prepared {
        let w = self.frame_len * 2;
        Prepared {
            frame_len: self.frame_len,
            classes: self.classes.clone(),
            features: idx.iter().flat_map(|&i| self.features[i * w..(i + 1) * w].iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            snr_db: idx.iter().map(|&i| self.snr_db[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// One split step over a simulated link:
/// `y = x_s + w̄`, exact update of Φ, `v = u + w̄′`, noisy update of Θ.
pub fn offline_step<T: Real>(
    device: &mut DeviceEnd<T>,
    server: &mut ServerEnd<T>,
    link: &mut SimLink,
    x: Tensor<T>,
    labels: &[usize],
) -> Result<StepStats, TrainError> {
    let xs = device.forward(x)?;
    let y = link.forward(&xs);
    let step = match server.train_step(&y, labels) {
        Ok(s) => s,
        Err(e) => {
            device.abort();
            return Err(e);
        }
    };
    let v = link.backward(&step.grad);
    device.apply_gradient(&v)?;
    Ok(StepStats { loss: step.loss, correct: step.correct, count: labels.len() })
}

/// Reference: one end-to-end step on the composed graph `g(f(x))` with no
/// link in between, using the same dropout streams and optimizers.
pub fn monolithic_step<T: Real>(
    device: &mut DeviceEnd<T>,
    server: &mut ServerEnd<T>,
    x: Tensor<T>,
    labels: &[usize],
) -> Result<StepStats, TrainError> {
    let mut g = Graph::new(Mode::Train);
    let xi = g.input(x.with_grad(false));
    let mut bn_d = Vec::new();
    let mut bn_s = Vec::new();
    let xs = device.net.forward(&mut g, xi, &mut device.dropout, &mut bn_d)?;
    let logits = server.net.forward(&mut g, xs, &mut server.dropout, &mut bn_s)?;
    let correct = count_correct(g.value(logits), labels);
    let loss_id = g.softmax_cce(logits, labels)?;
    let mut loss = g.value(loss_id).data()[0].f64();
    if !g.value(logits).is_finite() {
        loss = f64::NAN;
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { step: 0, loss });
    }
    g.backward(loss_id)?;
    let grads = g.param_grads();
    let (dev, srv): (Vec<_>, Vec<_>) = grads.into_iter().partition(|(n, _)| device.net.params.contains(n));
    device.opt.step(&mut device.net.params, &dev)?;
    server.opt.step(&mut server.net.params, &srv)?;
    apply_bn_updates(&mut device.net.params, &bn_d)?;
    apply_bn_updates(&mut server.net.params, &bn_s)?;
    Ok(StepStats { loss, correct, count: labels.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub link: LinkNoise,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Epoch index to start from when resuming.
    pub first_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { link: LinkNoise::default(), epochs: 30, patience: 10, seed: 0, first_epoch: 0 }
    }
}

/// Sample order for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut substream(seed, SHUFFLE, epoch as u64));
    order
}

/// Train both ends on `train`, keeping the parameters with the best
/// validation accuracy. A non-finite loss stops training and restores the
/// last retained parameters. Dropout and link noise are reseeded from
/// `(seed, epoch)` at every epoch, so a run resumed from the parameters and
/// optimizer state at the end of an epoch continues exactly. `progress`
/// sees every record together with the ends as they are at that point.
pub fn train_offline(
    device: &mut DeviceEnd<f32>,
    server: &mut ServerEnd<f32>,
    train: &Prepared,
    val: &Prepared,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord, &DeviceEnd<f32>, &ServerEnd<f32>),
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let start = Instant::now();
    let batch = device.opt.config.batch;
    let mut records = Vec::new();
    let mut best = (device.net.params.clone(), server.net.params.clone());
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut confusion = Confusion::new(train.classes.clone());
    let mut since_best = 0;
    let mut diverged = false;
    let mut stopped_early = false;
    let mut epochs_run = 0;
    for epoch in cfg.first_epoch..cfg.first_epoch + cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        device.reseed(cfg.seed, epoch as u64);
        server.reseed(cfg.seed, epoch as u64);
        let mut link = SimLink::for_epoch(cfg.link, cfg.seed, epoch as u64);
        let mut acc = StepStats::default();
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            // a single-sample batch has degenerate batch-norm statistics
            if chunk.len() < 2 && train.len() >= 2 {
                continue;
            }
            let (x, labels) = train.batch(chunk);
            match offline_step(device, server, &mut link, x, &labels) {
                Ok(s) => {
                    loss_sum += s.loss * s.count as f64;
                    acc.correct += s.correct;
                    acc.count += s.count;
                }
                Err(TrainError::NonFinite { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diverged || !device.net.params.is_finite() || !server.net.params.is_finite() {
            diverged = true;
            log::warn!("training diverged in epoch {}; restoring epoch {best_epoch}", epoch + 1);
            break;
        }
        epochs_run += 1;
        let count = acc.count.max(1) as f64;
        let tr = EpochRecord { epoch: epoch + 1, split: Split::Train, loss: loss_sum / count, acc: acc.correct as f64 / count };
        progress(&tr, device, server);
        records.push(tr.clone());
        let (score, conf) = if val.is_empty() {
            (tr.acc, None)
        } else {
            let ev = evaluate(&device.net, &server.net, val, cfg.link.fwd_snr_db, cfg.seed, batch)?;
            let rec = EpochRecord { epoch: epoch + 1, split: Split::Val, loss: ev.loss, acc: ev.accuracy };
            progress(&rec, device, server);
            records.push(rec);
            (ev.accuracy, Some(ev.confusion))
        };
        if score > best_acc {
            best_acc = score;
            best_epoch = epoch + 1;
            best = (device.net.params.clone(), server.net.params.clone());
            if let Some(c) = conf {
                confusion = c;
            }
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    device.net.params = best.0;
    server.net.params = best.1;
    Ok(TrainReport {
        optimizer: device.opt.config.rule.to_string(),
        records,
        best_epoch,
        best_val_acc: best_acc.max(0.0),
        confusion,
        epochs_run,
        stopped_early,
        diverged,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    /// `(snr_db, correct, total)` in ascending SNR order.
    pub by_snr: Vec<(i16, u64, u64)>,
    pub predictions: Vec<usize>,
}

/// Inference-mode evaluation through a link at `link_snr_db`; link noise
/// comes from a stream derived from `seed`.
pub fn evaluate<T: Real>(
    encoder: &SscNet<T>,
    classifier: &McNet<T>,
    data: &Prepared,
    link_snr_db: f64,
    seed: u64,
    batch: usize,
) -> Result<EvalResult, TrainError> {
    let mut noise = stream(seed, EVAL_LINK);
    let mut unused: StreamRng = stream(seed, "eval-dropout");
    let mut confusion = Confusion::new(data.classes.clone());
    let mut by_snr: BTreeMap<i16, (u64, u64)> = BTreeMap::new();
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let m = data.num_classes();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<T>(chunk);
        let xs = encoder.encode_tensor(x, Mode::Infer, &mut unused)?;
        let y = add_awgn(&xs, link_snr_db, &mut noise);
        let p = classifier.classify(&y, Mode::Infer, &mut unused)?;
        let probs: Vec<f64> = p.data().iter().map(|v| v.f64()).collect();
        loss_sum += super::cce_loss(&probs, m, &labels) * labels.len() as f64;
        for ((row, &l), &i) in p.data().chunks(m).zip(&labels).zip(chunk) {
            let pred = argmax(row);
            predictions.push(pred);
            confusion.add(l, pred);
            let e = by_snr.entry(data.snr_db[i]).or_default();
            e.0 += (pred == l) as u64;
            e.1 += 1;
        }
    }
    Ok(EvalResult {
        loss: if data.is_empty() { 0.0 } else { loss_sum / data.len() as f64 },
        accuracy: confusion.accuracy(),
        confusion,
        by_snr: by_snr.into_iter().map(|(s, (c, t))| (s, c, t)).collect(),
        predictions,
    })
}
