use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;

use super::{apply_channel, synthesize, ChannelSpec, Dataset, Gain, ModType, Record, SigError, SynthOptions};
use crate::numcore::rng::substream;

/// Per-frame randomisation of the sensing channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelRandomization {
    pub rayleigh: bool,
    /// Frequency offsets are drawn uniformly from ±`max_nu_ts` (ν·Ts).
    pub max_nu_ts: f64,
    pub random_phase: bool,
}

/// Recipe for a synthetic labelled corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub mods: Vec<ModType>,
    pub frames_per_class: usize,
    pub frame_len: usize,
    /// Sensing SNRs, cycled so every (class, SNR) cell is balanced.
    pub snrs_db: Vec<f64>,
    pub opts: SynthOptions,
    pub channel: ChannelRandomization,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(mods: Vec<ModType>, frames_per_class: usize, frame_len: usize, snr_db: f64, seed: u64) -> Self {
        SynthSpec {
            mods,
            frames_per_class,
            frame_len,
            snrs_db: vec![snr_db],
            opts: SynthOptions::default(),
            channel: ChannelRandomization::default(),
            seed,
        }
    }
}

const SYNTH_STREAM: &str = "synth";

/// Synthesize frame `index` of the corpus. Classes interleave so that
/// any prefix of the corpus is near-balanced.
pub fn synth_frame(spec: &SynthSpec, index: usize) -> Result<Record, SigError> {
    let m = spec.mods.len();
    let class = index % m;
    let snr = spec.snrs_db[(index / m) % spec.snrs_db.len()];
    let mut rng = substream(spec.seed, SYNTH_STREAM, index as u64);
    let clean = synthesize(spec.mods[class], spec.frame_len, &spec.opts, &mut rng)?;
    let ch = ChannelSpec {
        gain: if spec.channel.rayleigh { Gain::RayleighBlock } else { Gain::Constant(Complex64::new(1.0, 0.0)) },
        nu_hz: if spec.channel.max_nu_ts > 0.0 { rng.random_range(-spec.channel.max_nu_ts..=spec.channel.max_nu_ts) } else { 0.0 },
        theta: if spec.channel.random_phase { rng.random_range(-PI..PI) } else { 0.0 },
        ts_s: 1.0,
        snr_db: snr,
    };
    let x = apply_channel(&clean.samples, &ch, &mut rng)?;
    Ok(Record {
        iq: x.iter().flat_map(|v| [v.re as f32, v.im as f32]).collect(),
        label: class as u8,
        snr_db: snr.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16,
    })
}

/// Build the whole corpus; every frame has its own derived random stream.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset, SigError> {
    if spec.mods.is_empty() || spec.mods.len() > 256 {
        return Err(SigError::Config(format!("need 1..=256 modulation classes, got {}", spec.mods.len())));
    }
    if spec.snrs_db.is_empty() {
        return Err(SigError::Config("at least one sensing SNR is required".into()));
    }
    let mut ds = Dataset::new(spec.frame_len, spec.mods.iter().map(|m| m.name().to_string()).collect());
    let total = spec.frames_per_class * spec.mods.len();
    ds.records.reserve(total);
    for i in 0..total {
        ds.records.push(synth_frame(spec, i)?);
    }
    Ok(ds)
}
