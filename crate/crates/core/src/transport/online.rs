use crate::numcore::rng::{stream, StreamRng, LINK_BACKWARD, LINK_FORWARD};
use crate::numcore::Tensor;
use crate::splittrain::{add_awgn, epoch_order, DeviceEnd, Prepared, ServerEnd, ServerStep, TrainError};

use super::link::ByteLink;
use super::session::{Peer, Reason, Role};
use super::{FrameKind, TransportError};

fn rows(t: &Tensor<f32>) -> impl Iterator<Item = &[f32]> {
    let (b, n) = t.rows_cols();
    (0..b).map(move |i| &t.data()[i * n..(i + 1) * n])
}

fn expect(kind: FrameKind, got: FrameKind) -> Result<(), TransportError> {
    if kind == got {
        Ok(())
    } else {
        Err(TransportError::Malformed(format!("expected {} but got {}", kind.name(), got.name())))
    }
}

/// One online step on the device: encode, stream the batch out one sample
/// at a time (EMBED then LABEL), collect the gradient rows, add feedback
/// noise and update Θ. On any failure the pending forward pass is dropped
/// and Θ is untouched.
pub fn device_step<L: ByteLink>(
    peer: &mut Peer<L>,
    device: &mut DeviceEnd<f32>,
    bwd: &mut StreamRng,
    x: Tensor<f32>,
    labels: &[usize],
) -> Result<(), TransportError> {
    let cfg = peer.state.config;
    if labels.len() != cfg.batch {
        return Err(TransportError::Config(format!("online steps need full batches of {}, got {}", cfg.batch, labels.len())));
    }
    let xs = device.forward(x)?;
    let result = (|| {
        for (row, &label) in rows(&xs).zip(labels) {
            peer.send_data(FrameKind::Embed, row)?;
            let mut onehot = vec![0.0f32; cfg.num_classes];
            *onehot.get_mut(label).ok_or_else(|| TransportError::Config(format!("label {label} out of range")))? = 1.0;
            peer.send_data(FrameKind::Label, &onehot)?;
        }
        let mut u = Vec::with_capacity(cfg.batch * cfg.embed_dim);
        for _ in 0..cfg.batch {
            let (kind, v) = peer.recv_data()?;
            expect(FrameKind::Grad, kind)?;
            u.extend(v);
        }
        Ok(Tensor::new(vec![cfg.batch, cfg.embed_dim], u).expect("lengths checked"))
    })();
    let u = match result {
        Ok(u) => u,
        Err(e) => {
            device.abort();
            return Err(e);
        }
    };
    let v = add_awgn(&u, cfg.noise.bwd_snr_db, bwd);
    device.apply_gradient(&v)?;
    peer.state.last_committed += 1;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceSummary {
    pub steps: u64,
}

/// Drive `epochs` epochs of online training from the device, full batches
/// only, in the same sample order as offline training. Sends BYE when done.
pub fn run_device<L: ByteLink>(
    peer: &mut Peer<L>,
    device: &mut DeviceEnd<f32>,
    data: &Prepared,
    epochs: usize,
    first_epoch: usize,
    max_steps: Option<u64>,
) -> Result<DeviceSummary, TransportError> {
    if peer.state.role != Role::Device {
        return Err(TransportError::Config("run_device needs a device-side session".into()));
    }
    let cfg = peer.state.config;
    let mut bwd = stream(cfg.seed, LINK_BACKWARD);
    let mut steps = 0;
    'outer: for epoch in first_epoch..first_epoch + epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for chunk in order.chunks_exact(cfg.batch) {
            if max_steps.is_some_and(|m| steps >= m) {
                break 'outer;
            }
            let (x, labels) = data.batch(chunk);
            device_step(peer, device, &mut bwd, x, &labels)?;
            steps += 1;
        }
    }
    peer.close(Reason::Done, "");
    Ok(DeviceSummary { steps })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServeSummary {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub correct: u64,
    pub seen: u64,
}

/// Server loop: accumulate a batch of (EMBED, LABEL) pairs, add forward
/// noise to the whole batch, update Φ, and return the gradient rows. Ends
/// normally when the device says BYE between steps.
pub fn serve<L: ByteLink>(
    peer: &mut Peer<L>,
    server: &mut ServerEnd<f32>,
    mut on_step: impl FnMut(u64, &ServerStep<f32>),
) -> Result<ServeSummary, TransportError> {
    if peer.state.role != Role::Server {
        return Err(TransportError::Config("serve needs a server-side session".into()));
    }
    let cfg = peer.state.config;
    let mut fwd = stream(cfg.seed, LINK_FORWARD);
    let mut summary = ServeSummary::default();
    loop {
        let mut xs = Vec::with_capacity(cfg.batch * cfg.embed_dim);
        let mut labels = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            let (kind, v) = match peer.recv_data() {
                Err(e) if e.is_done() && i == 0 => return Ok(summary),
                Err(e) if e.is_done() => {
                    log::warn!("device closed mid-batch after {i} samples; partial batch dropped");
                    return Ok(summary);
                }
                r => r?,
            };
            expect(FrameKind::Embed, kind)?;
            xs.extend(v);
            let (kind, p) = peer.recv_data()?;
            expect(FrameKind::Label, kind)?;
            let label = p.iter().position(|&v| v == 1.0).filter(|_| p.iter().filter(|&&v| v != 0.0).count() == 1);
            labels.push(label.ok_or_else(|| TransportError::Malformed("LABEL is not one-hot".into()))?);
        }
        let x = Tensor::new(vec![cfg.batch, cfg.embed_dim], xs).expect("lengths checked");
        let y = add_awgn(&x, cfg.noise.fwd_snr_db, &mut fwd);
        let step = match server.train_step(&y, &labels) {
            Ok(s) => s,
            Err(e @ TrainError::NonFinite { .. }) => {
                peer.close(Reason::Diverged, &e.to_string());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        for row in rows(&step.grad) {
            peer.send_data(FrameKind::Grad, row)?;
        }
        peer.state.last_committed += 1;
        summary.steps += 1;
        summary.losses.push(step.loss);
        summary.correct += step.correct as u64;
        summary.seen += labels.len() as u64;
        on_step(summary.steps, &step);
    }
}

/// In-process counterpart of [`run_device`] + [`serve`]: the same batches,
/// dropout streams and link noise streams, driven through
/// [`offline_step`](crate::splittrain::offline_step). Returns the losses.
pub fn offline_mirror(
    device: &mut DeviceEnd<f32>,
    server: &mut ServerEnd<f32>,
    data: &Prepared,
    cfg: &super::SessionConfig,
    epochs: usize,
    first_epoch: usize,
    max_steps: Option<u64>,
) -> Result<Vec<f64>, TrainError> {
    let mut link = crate::splittrain::SimLink::new(cfg.noise, cfg.seed);
    let mut losses = Vec::new();
    'outer: for epoch in first_epoch..first_epoch + epochs {
        for chunk in epoch_order(data.len(), cfg.seed, epoch).chunks_exact(cfg.batch) {
            if max_steps.is_some_and(|m| losses.len() as u64 >= m) {
                break 'outer;
            }
            let (x, labels) = data.batch(chunk);
            losses.push(crate::splittrain::offline_step(device, server, &mut link, x, &labels)?.loss);
        }
    }
    Ok(losses)
}
