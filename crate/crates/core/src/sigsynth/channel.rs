use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::SigError;

/// Complex gain model of the sensing channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gain {
    Constant(Complex64),
    /// One CN(0, 1) draw held for the whole frame.
    RayleighBlock,
}

/// Sensing channel `x[l] = h[l]·e^{−j(2πν·l·Ts + θ)}·s[l] + z[l]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    pub gain: Gain,
    pub nu_hz: f64,
    /// Phase offset in radians.
    pub theta: f64,
    pub ts_s: f64,
    /// Signal-to-noise ratio in dB; `+∞` disables noise.
    pub snr_db: f64,
}

impl ChannelSpec {
    /// Offset-free unit-gain channel at the given SNR.
    pub fn awgn(snr_db: f64) -> Self {
        ChannelSpec { gain: Gain::Constant(Complex64::new(1.0, 0.0)), nu_hz: 0.0, theta: 0.0, ts_s: 1.0, snr_db }
    }

    pub fn validate(&self) -> Result<(), SigError> {
        if !(self.ts_s > 0.0) || !self.ts_s.is_finite() {
            return Err(SigError::Config(format!("sampling period must be positive, got {}", self.ts_s)));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(SigError::Config(format!("snr_db must be finite or +inf, got {}", self.snr_db)));
        }
        if !self.nu_hz.is_finite() || !self.theta.is_finite() {
            return Err(SigError::Config("frequency and phase offsets must be finite".into()));
        }
        Ok(())
    }
}

/// Pass a clean frame through the sensing channel. Noise variance is the
/// measured power of the faded signal divided by the linear SNR.
pub fn apply_channel<R: Rng + ?Sized>(
    s: &[Complex64],
    spec: &ChannelSpec,
    rng: &mut R,
) -> Result<Vec<Complex64>, SigError> {
    spec.validate()?;
    if s.is_empty() {
        return Err(SigError::Config("cannot pass an empty frame through the channel".into()));
    }
    let h = match spec.gain {
        Gain::Constant(h) => h,
        Gain::RayleighBlock => {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re, im) / 2f64.sqrt()
        }
    };
    let faded: Vec<Complex64> = s
        .iter()
        .enumerate()
        .map(|(l, &v)| {
            let arg = 2.0 * PI * spec.nu_hz * l as f64 * spec.ts_s + spec.theta;
            if arg == 0.0 {
                h * v
            } else {
                h * Complex64::from_polar(1.0, -arg) * v
            }
        })
        .collect();
    if spec.snr_db == f64::INFINITY {
        return Ok(faded);
    }
    let power = faded.iter().map(|v| v.norm_sqr()).sum::<f64>() / faded.len() as f64;
    let sigma = (power / 10f64.powf(spec.snr_db / 10.0) / 2.0).sqrt();
    Ok(faded
        .into_iter()
        .map(|v| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            v + Complex64::new(re, im) * sigma
        })
        .collect())
}

/// Amplitude/phase matrix, row-major `L×2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApFrame {
    pub data: Vec<f32>,
}

impl ApFrame {
    pub fn len(&self) -> usize {
        self.data.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn amplitude(&self, l: usize) -> f32 {
        self.data[2 * l]
    }

    pub fn phase(&self, l: usize) -> f32 {
        self.data[2 * l + 1]
    }
}

/// Phase in (−π, π]; zero samples have phase 0.
pub fn phase_of(re: f64, im: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let p = im.atan2(re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

pub fn to_ap(x: &[Complex64]) -> ApFrame {
    ApFrame { data: to_ap_f32(x.iter().flat_map(|v| [v.re as f32, v.im as f32])) }
}

/// A/P conversion from interleaved I/Q values.
pub fn iq_to_ap(iq: &[f32]) -> ApFrame {
    ApFrame { data: to_ap_f32(iq.iter().copied()) }
}

fn to_ap_f32(iq: impl Iterator<Item = f32>) -> Vec<f32> {
    let v: Vec<f32> = iq.collect();
    let mut out = Vec::with_capacity(v.len());
    for pair in v.chunks_exact(2) {
        let (re, im) = (pair[0] as f64, pair[1] as f64);
        out.push(re.hypot(im) as f32);
        let p = phase_of(re, im) as f32;
        // rounding π to f32 overshoots; clamp back into the interval
        out.push(p.clamp(-std::f32::consts::PI + f32::EPSILON, std::f32::consts::PI));
    }
    out
}
