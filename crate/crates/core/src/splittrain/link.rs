use rand_distr::{Distribution, StandardNormal};

use crate::numcore::rng::{stream, substream, StreamRng, LINK_BACKWARD, LINK_FORWARD};
use crate::numcore::{Real, Tensor};

/// SNRs of the embedding channel and of the gradient feedback channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkNoise {
    pub fwd_snr_db: f64,
    pub bwd_snr_db: f64,
}

impl LinkNoise {
    pub const NOISELESS: LinkNoise = LinkNoise { fwd_snr_db: f64::INFINITY, bwd_snr_db: f64::INFINITY };

    pub fn new(fwd_snr_db: f64, bwd_snr_db: f64) -> Self {
        LinkNoise { fwd_snr_db, bwd_snr_db }
    }
}

impl Default for LinkNoise {
    fn default() -> Self {
        LinkNoise::new(10.0, 10.0)
    }
}

/// `mean_power / 10^(snr/10)`; zero at infinite SNR.
pub fn noise_variance(mean_power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        mean_power / 10f64.powf(snr_db / 10.0)
    }
}

/// `t + w` with `w ~ N(0, σ²)` elementwise, `σ²` referenced to the mean
/// square of `t`. Infinite SNR returns `t` and draws nothing.
pub fn add_awgn<T: Real>(t: &Tensor<T>, snr_db: f64, rng: &mut StreamRng) -> Tensor<T> {
    if snr_db == f64::INFINITY || t.numel() == 0 {
        return t.clone();
    }
    let power = t.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>() / t.numel() as f64;
    let sigma = noise_variance(power, snr_db).sqrt();
    let data = t
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(v.f64() + sigma * z)
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Simulated link: one seeded noise stream per direction.
#[derive(Debug, Clone)]
pub struct SimLink {
    pub noise: LinkNoise,
    pub fwd: StreamRng,
    pub bwd: StreamRng,
}

impl SimLink {
    pub fn new(noise: LinkNoise, seed: u64) -> Self {
        SimLink { noise, fwd: stream(seed, LINK_FORWARD), bwd: stream(seed, LINK_BACKWARD) }
    }

    /// Streams for one training epoch, independent of earlier epochs.
    pub fn for_epoch(noise: LinkNoise, seed: u64, epoch: u64) -> Self {
        SimLink { noise, fwd: substream(seed, LINK_FORWARD, epoch), bwd: substream(seed, LINK_BACKWARD, epoch) }
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        add_awgn(x, self.noise.fwd_snr_db, &mut self.fwd)
    }

    pub fn backward<T: Real>(&mut self, u: &Tensor<T>) -> Tensor<T> {
        add_awgn(u, self.noise.bwd_snr_db, &mut self.bwd)
    }
}
