use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::SigError;

/// Supported modulation types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModType {
    Bpsk,
    Qpsk,
    Psk8,
    Pam4,
    Qam16,
    Qam64,
    Cpfsk,
    Gfsk,
    AmDsb,
    AmSsb,
    Wbfm,
}

impl ModType {
    pub const ALL: [ModType; 11] = [
        ModType::Bpsk,
        ModType::Qpsk,
        ModType::Psk8,
        ModType::Pam4,
        ModType::Qam16,
        ModType::Qam64,
        ModType::Cpfsk,
        ModType::Gfsk,
        ModType::AmDsb,
        ModType::AmSsb,
        ModType::Wbfm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModType::Bpsk => "BPSK",
            ModType::Qpsk => "QPSK",
            ModType::Psk8 => "8PSK",
            ModType::Pam4 => "PAM4",
            ModType::Qam16 => "16QAM",
            ModType::Qam64 => "64QAM",
            ModType::Cpfsk => "CPFSK",
            ModType::Gfsk => "GFSK",
            ModType::AmDsb => "AM-DSB",
            ModType::AmSsb => "AM-SSB",
            ModType::Wbfm => "WBFM",
        }
    }

    /// Symbol-driven types (everything except the analog AM/FM family).
    pub fn is_digital(self) -> bool {
        !matches!(self, ModType::AmDsb | ModType::AmSsb | ModType::Wbfm)
    }

    /// Types with a fixed point constellation, decodable by a
    /// minimum-distance slicer.
    pub fn has_constellation(self) -> bool {
        self.constellation().is_some()
    }

    /// Unit-average-energy constellation indexed by Gray-coded bit pattern.
    pub fn constellation(self) -> Option<Vec<Complex64>> {
        let points = match self {
            ModType::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            ModType::Qpsk => {
                // 00 → π/4, 01 → 3π/4, 11 → −3π/4, 10 → −π/4
                let angle = |b: usize| match b {
                    0b00 => PI / 4.0,
                    0b01 => 3.0 * PI / 4.0,
                    0b11 => -3.0 * PI / 4.0,
                    _ => -PI / 4.0,
                };
                (0..4).map(|b| Complex64::from_polar(1.0, angle(b))).collect()
            }
            ModType::Psk8 => (0..8)
                .map(|b| Complex64::from_polar(1.0, 2.0 * PI * gray_decode(b) as f64 / 8.0))
                .collect(),
            ModType::Pam4 => (0..4).map(|b| Complex64::new(pam_level(b, 4), 0.0)).collect(),
            ModType::Qam16 => square_qam(4),
            ModType::Qam64 => square_qam(8),
            _ => return None,
        };
        Some(normalize_points(points))
    }

    fn bits_per_symbol(self) -> usize {
        match self {
            ModType::Bpsk | ModType::Cpfsk | ModType::Gfsk => 1,
            ModType::Qpsk | ModType::Pam4 => 2,
            ModType::Psk8 => 3,
            ModType::Qam16 => 4,
            ModType::Qam64 => 6,
            _ => 0,
        }
    }

    /// Alphabet size for symbol-driven types.
    pub fn order(self) -> usize {
        1 << self.bits_per_symbol()
    }
}

impl fmt::Display for ModType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModType {
    type Err = SigError;

    /// Accepts canonical names and common spellings such as `QAM16`,
    /// `PSK8` or `AM_DSB`, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_uppercase();
        let m = match key.as_str() {
            "BPSK" => ModType::Bpsk,
            "QPSK" => ModType::Qpsk,
            "8PSK" | "PSK8" => ModType::Psk8,
            "PAM4" | "4PAM" => ModType::Pam4,
            "16QAM" | "QAM16" => ModType::Qam16,
            "64QAM" | "QAM64" => ModType::Qam64,
            "CPFSK" => ModType::Cpfsk,
            "GFSK" => ModType::Gfsk,
            "AMDSB" => ModType::AmDsb,
            "AMSSB" => ModType::AmSsb,
            "WBFM" => ModType::Wbfm,
            _ => return Err(SigError::UnknownModulation(s.to_string())),
        };
        Ok(m)
    }
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 1 {
        g >>= 1;
        b ^= g;
    }
    b
}

/// Gray-coded PAM level for `bits` out of `levels`, unnormalised odd integers.
fn pam_level(bits: usize, levels: usize) -> f64 {
    let idx = gray_decode(bits);
    2.0 * idx as f64 - (levels as f64 - 1.0)
}

fn square_qam(side: usize) -> Vec<Complex64> {
    let half = side.trailing_zeros() as usize;
    (0..side * side)
        .map(|b| {
            let i_bits = b >> half;
            let q_bits = b & (side - 1);
            Complex64::new(pam_level(i_bits, side), pam_level(q_bits, side))
        })
        .collect()
}

fn normalize_points(points: Vec<Complex64>) -> Vec<Complex64> {
    let energy = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64;
    let s = 1.0 / energy.sqrt();
    points.into_iter().map(|p| p * s).collect()
}

/// Transmit pulse.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Pulse {
    #[default]
    Rect,
    /// Root-raised cosine with the given roll-off, truncated to ±4 symbols.
    RootRaisedCosine(f64),
}

const RRC_SPAN: usize = 4;

fn rrc_taps(beta: f64, sps: usize) -> Vec<f64> {
    let n = 2 * RRC_SPAN * sps + 1;
    let mid = (RRC_SPAN * sps) as f64;
    let taps: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 - mid) / sps as f64;
            if t.abs() < 1e-12 {
                1.0 - beta + 4.0 * beta / PI
            } else if beta > 0.0 && (t.abs() - 1.0 / (4.0 * beta)).abs() < 1e-9 {
                beta / 2f64.sqrt()
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * beta)).sin() + (1.0 - 2.0 / PI) * (PI / (4.0 * beta)).cos())
            } else {
                let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
                let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
                num / den
            }
        })
        .collect();
    let e = taps.iter().map(|v| v * v).sum::<f64>().sqrt();
    taps.into_iter().map(|v| v / e).collect()
}

/// Shape symbol values into `len` samples at `sps` samples per symbol.
pub fn shape_symbols(symbols: &[Complex64], sps: usize, pulse: Pulse, len: usize) -> Vec<Complex64> {
    match pulse {
        Pulse::Rect => symbols.iter().flat_map(|&s| std::iter::repeat_n(s, sps)).take(len).collect(),
        Pulse::RootRaisedCosine(beta) => {
            let taps = rrc_taps(beta, sps);
            let delay = RRC_SPAN * sps;
            // symbols[0..RRC_SPAN] are lead-in, the frame starts at the next one
            (0..len)
                .map(|i| {
                    let t = i + delay + RRC_SPAN * sps;
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (k, &s) in symbols.iter().enumerate() {
                        let pos = k * sps;
                        if pos <= t && t - pos < taps.len() {
                            acc += s * taps[t - pos];
                        }
                    }
                    acc
                })
                .collect()
        }
    }
}

/// A clean frame with the symbol indices that produced it (empty for
/// analog types).
#[derive(Debug, Clone)]
pub struct CleanFrame {
    pub samples: Vec<Complex64>,
    pub symbols: Vec<usize>,
}

/// Synthesis options beyond the modulation itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub sps: usize,
    pub pulse: Pulse,
    /// Modulation index for CPFSK/GFSK.
    pub fsk_index: f64,
    /// Gaussian filter bandwidth-time product for GFSK.
    pub gfsk_bt: f64,
    /// Analog message bandwidth as a fraction of the sampling rate.
    pub message_bandwidth: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { sps: 8, pulse: Pulse::Rect, fsk_index: 0.5, gfsk_bt: 0.35, message_bandwidth: 0.1 }
    }
}

/// Synthesize a clean baseband frame of `len` samples, scaled to unit
/// measured average power.
pub fn synthesize<R: Rng + ?Sized>(
    m: ModType,
    len: usize,
    opts: &SynthOptions,
    rng: &mut R,
) -> Result<CleanFrame, SigError> {
    if len == 0 {
        return Err(SigError::Config("frame length must be positive".into()));
    }
    if opts.sps == 0 {
        return Err(SigError::Config("samples per symbol must be at least 1".into()));
    }
    if m.is_digital() && len % opts.sps != 0 {
        return Err(SigError::Config(format!(
            "frame length {len} is not a multiple of samples per symbol {}",
            opts.sps
        )));
    }
    let n_sym = len / opts.sps;
    let (samples, symbols) = match m {
        ModType::Cpfsk | ModType::Gfsk => {
            let symbols: Vec<usize> = (0..n_sym).map(|_| rng.random_range(0..2)).collect();
            let bt = (m == ModType::Gfsk).then_some(opts.gfsk_bt);
            (fsk(&symbols, opts.sps, opts.fsk_index, bt), symbols)
        }
        ModType::AmDsb | ModType::AmSsb | ModType::Wbfm => (analog(m, len, opts.message_bandwidth, rng), Vec::new()),
        _ => {
            let points = m.constellation().expect("constellation type");
            let lead = match opts.pulse {
                Pulse::Rect => 0,
                Pulse::RootRaisedCosine(_) => RRC_SPAN,
            };
            let total = n_sym + 2 * lead;
            let all: Vec<usize> = (0..total).map(|_| rng.random_range(0..points.len())).collect();
            let values: Vec<Complex64> = all.iter().map(|&i| points[i]).collect();
            let samples = shape_symbols(&values, opts.sps, opts.pulse, len);
            (samples, all[lead..lead + n_sym].to_vec())
        }
    };
    Ok(CleanFrame { samples: unit_power(samples), symbols })
}

/// Map explicit symbol indices through a constellation with rectangular
/// pulses, without power renormalisation.
pub fn modulate_symbols(m: ModType, symbols: &[usize], sps: usize) -> Result<Vec<Complex64>, SigError> {
    let points = m
        .constellation()
        .ok_or_else(|| SigError::Config(format!("{m} has no point constellation")))?;
    symbols
        .iter()
        .map(|&s| points.get(s).copied().ok_or_else(|| SigError::Config(format!("symbol {s} outside {m} alphabet"))))
        .collect::<Result<Vec<_>, _>>()
        .map(|v| shape_symbols(&v, sps, Pulse::Rect, symbols.len() * sps))
}

fn unit_power(samples: Vec<Complex64>) -> Vec<Complex64> {
    let p = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64;
    if p <= 0.0 {
        return samples;
    }
    let s = 1.0 / p.sqrt();
    samples.into_iter().map(|v| v * s).collect()
}

fn fsk(bits: &[usize], sps: usize, h: f64, bt: Option<f64>) -> Vec<Complex64> {
    let mut freq: Vec<f64> = bits.iter().flat_map(|&b| std::iter::repeat_n(if b == 1 { 1.0 } else { -1.0 }, sps)).collect();
    if let Some(bt) = bt {
        freq = convolve_same(&freq, &gaussian_taps(bt, sps));
    }
    let mut phase = 0.0f64;
    freq.iter()
        .map(|&f| {
            let s = Complex64::from_polar(1.0, phase);
            phase += PI * h * f / sps as f64;
            s
        })
        .collect()
}

fn gaussian_taps(bt: f64, sps: usize) -> Vec<f64> {
    let span = 2 * sps;
    let sigma = (2f64.ln()).sqrt() / (2.0 * PI * bt) * sps as f64;
    let taps: Vec<f64> = (0..=2 * span)
        .map(|i| {
            let t = i as f64 - span as f64;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / s).collect()
}

fn lowpass_taps(cutoff: f64, n: usize) -> Vec<f64> {
    let mid = (n - 1) as f64 / 2.0;
    let taps: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 { 2.0 * cutoff } else { (2.0 * PI * cutoff * t).sin() / (PI * t) };
            let hamming = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / s).collect()
}

/// Windowed FIR Hilbert transformer (odd length).
fn hilbert_taps(n: usize) -> Vec<f64> {
    let mid = (n / 2) as isize;
    (0..n)
        .map(|i| {
            let k = i as isize - mid;
            if k % 2 == 0 {
                0.0
            } else {
                let hamming = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
                2.0 / (PI * k as f64) * hamming
            }
        })
        .collect()
}

fn convolve_same(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let half = taps.len() / 2;
    (0..x.len())
        .map(|i| {
            taps.iter()
                .enumerate()
                .filter_map(|(k, &t)| (i + half).checked_sub(k).and_then(|j| x.get(j)).map(|&v| v * t))
                .sum()
        })
        .collect()
}

const MESSAGE_TAPS: usize = 63;

/// Band-limited Gaussian message with unit peak magnitude.
fn message<R: Rng + ?Sized>(len: usize, bandwidth: f64, rng: &mut R) -> Vec<f64> {
    let taps = lowpass_taps(bandwidth, MESSAGE_TAPS);
    let raw: Vec<f64> = (0..len + 2 * MESSAGE_TAPS).map(|_| StandardNormal.sample(rng)).collect();
    let filtered = convolve_same(&raw, &taps);
    let m = filtered[MESSAGE_TAPS..MESSAGE_TAPS + len].to_vec();
    let peak = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        m.into_iter().map(|v| v / peak).collect()
    } else {
        m
    }
}

fn analog<R: Rng + ?Sized>(m: ModType, len: usize, bandwidth: f64, rng: &mut R) -> Vec<Complex64> {
    let msg = message(len, bandwidth, rng);
    match m {
        ModType::AmDsb => msg.iter().map(|&v| Complex64::new(1.0 + 0.5 * v, 0.0)).collect(),
        ModType::AmSsb => {
            let q = convolve_same(&msg, &hilbert_taps(MESSAGE_TAPS));
            msg.iter().zip(q).map(|(&i, q)| Complex64::new(i, q)).collect()
        }
        _ => {
            // peak deviation 0.25·fs
            let mut phase = 0.0f64;
            msg.iter()
                .map(|&v| {
                    let s = Complex64::from_polar(1.0, phase);
                    phase += 2.0 * PI * 0.25 * v;
                    s
                })
                .collect()
        }
    }
}

/// Nearest-point slicing of symbol-rate averages of a rectangular-pulse
/// frame.
pub fn slice_symbols(m: ModType, samples: &[Complex64], sps: usize) -> Option<Vec<usize>> {
    let points = m.constellation()?;
    Some(
        samples
            .chunks(sps)
            .map(|chunk| {
                let avg = chunk.iter().sum::<Complex64>() / chunk.len() as f64;
                points
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - avg).norm_sqr().total_cmp(&(b.1 - avg).norm_sqr()))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect(),
    )
}
