use rand::seq::SliceRandom;

use crate::numcore::rng::substream;
use crate::sigsynth::Dataset;

use super::{offline_step, DeviceEnd, LinkNoise, Optimizer, OptimizerConfig, Prepared, ServerEnd, SimLink, TrainError};

/// Fine-tuning budget for adapting trained ends to a shifted distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Fraction of the adaptation set used, in [0, 1].
    pub fraction: f64,
    pub epochs: usize,
    pub link: LinkNoise,
    pub seed: u64,
}

/// Fine-tune every layer of both ends at one tenth of their learning rate
/// on a seeded `fraction` of `data`. Returns the number of steps taken;
/// fraction 0 leaves the ends untouched.
pub fn adapt(
    device: &mut DeviceEnd<f32>,
    server: &mut ServerEnd<f32>,
    data: &Prepared,
    cfg: &AdaptConfig,
) -> Result<usize, TrainError> {
    if !(0.0..=1.0).contains(&cfg.fraction) {
        return Err(TrainError::Config(format!("adaptation fraction {} outside [0, 1]", cfg.fraction)));
    }
    let take = (cfg.fraction * data.len() as f64).round() as usize;
    if take == 0 || cfg.epochs == 0 {
        return Ok(0);
    }
    let mut pool: Vec<usize> = (0..data.len()).collect();
    pool.shuffle(&mut substream(cfg.seed, "adapt-subset", 0));
    pool.truncate(take);
    let subset = data.subset(&pool);

    let slow = |c: OptimizerConfig| OptimizerConfig { eta: c.eta / 10.0, ..c };
    device.opt = Optimizer::new(slow(device.opt.config));
    server.opt = Optimizer::new(slow(server.opt.config));
    let batch = device.opt.config.batch;
    let mut link = SimLink::new(cfg.link, cfg.seed ^ 0xada9);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..subset.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "adapt-shuffle", epoch as u64));
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 && subset.len() >= 2 {
                continue;
            }
            let (x, labels) = subset.batch(chunk);
            offline_step(device, server, &mut link, x, &labels)?;
            steps += 1;
        }
    }
    Ok(steps)
}

/// Distribution shift used for adaptation experiments: only the first L/2
/// samples of each frame are sensed, and L/2 zeros are inserted uniformly
/// (one after every sample) to restore length L.
pub fn halve_with_zeros(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    let half = ds.frame_len / 2;
    for r in &mut out.records {
        let mut iq = vec![0.0f32; r.iq.len()];
        for l in 0..half {
            iq[4 * l] = r.iq[2 * l];
            iq[4 * l + 1] = r.iq[2 * l + 1];
        }
        r.iq = iq;
    }
    out
}
