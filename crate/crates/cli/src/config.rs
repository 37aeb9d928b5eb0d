use std::path::{Path, PathBuf};

use camc_core::mcnet::McConfig;
use camc_core::sigsynth::{ModType, Pulse, SynthOptions, SynthSpec};
use camc_core::splittrain::{LinkNoise, OptimizerConfig, Rule};
use camc_core::sscnet::SscConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Everything a run depends on. Two runs from the same config produce the
/// same artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub link: LinkConfig,
    pub train: TrainSection,
    pub compress: CompressSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CAMCDS01 files. When absent the split is synthesized.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub mods: Vec<String>,
    pub frame_len: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Sensing SNRs of the synthesized splits.
    pub snr_db: Vec<f64>,
    pub sps: usize,
    /// Root-raised-cosine roll-off; rectangular pulses when absent.
    pub rrc_rolloff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub conv1_kernels: usize,
    pub conv1_len: usize,
    pub conv2_kernels: usize,
    pub conv2_len: usize,
    pub lstm_units: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub dense2: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub fwd_snr_db: f64,
    pub bwd_snr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub rule: String,
    pub eta: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub mode: TrainMode,
    /// Step cap for online runs.
    pub online_steps: Option<u64>,
    /// Server address for online runs; `CAMC_BIND` or the default otherwise.
    pub bind: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressSection {
    pub rho_device: f64,
    pub rho_server: f64,
    pub bits: u8,
    pub lambda: f64,
    pub finetune_epochs: usize,
    /// Ratios of the pruning sweep.
    pub rhos: Vec<f64>,
    /// Frames in the fixed set used for quantized-vs-float agreement.
    pub agreement_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub sensing_snr_db: Vec<f64>,
    pub per_class: usize,
    pub grid_sensing_snr_db: Vec<f64>,
    pub grid_link_snr_db: Vec<f64>,
    pub grid_per_class: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            link: LinkConfig::default(),
            train: TrainSection::default(),
            compress: CompressSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            val: None,
            test: None,
            mods: ["BPSK", "QPSK", "8PSK", "16QAM"].map(String::from).to_vec(),
            frame_len: 128,
            train_per_class: 5000,
            val_per_class: 500,
            test_per_class: 1000,
            snr_db: vec![10.0],
            sps: 8,
            rrc_rolloff: None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = SscConfig::new(128, 16);
        let m = McConfig::new(16, 4);
        ModelConfig {
            embed_dim: 16,
            conv1_kernels: s.conv1_kernels,
            conv1_len: s.conv1_len,
            conv2_kernels: s.conv2_kernels,
            conv2_len: s.conv2_len,
            lstm_units: m.lstm_units,
            heads: m.heads,
            head_dim: m.head_dim,
            dense2: m.dense2,
            dropout: s.dropout,
        }
    }
}

impl Default for LinkConfig {
    fn default() -> Self {
        let d = LinkNoise::default();
        LinkConfig { fwd_snr_db: d.fwd_snr_db, bwd_snr_db: d.bwd_snr_db }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            rule: "adam".into(),
            eta: 1e-3,
            batch: 128,
            epochs: 8,
            patience: 10,
            mode: TrainMode::Offline,
            online_steps: None,
            bind: None,
        }
    }
}

impl Default for CompressSection {
    fn default() -> Self {
        CompressSection {
            rho_device: 0.7,
            rho_server: 0.7,
            bits: 8,
            lambda: 0.1,
            finetune_epochs: 1,
            rhos: (1..=9).map(|i| i as f64 / 10.0).collect(),
            agreement_frames: 2000,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            sensing_snr_db: (-5..=5).map(|i| 2.0 * i as f64).collect(),
            per_class: 500,
            grid_sensing_snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            grid_link_snr_db: vec![0.0, 5.0, 10.0, 20.0, f64::INFINITY],
            grid_per_class: 250,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path` (or the defaults) and apply `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(cfg_err(format!("config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        self.mods()?;
        self.rule()?;
        self.optimizer().validate().map_err(cfg_err)?;
        self.ssc().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.mc().validate().map_err(|e| cfg_err(e.to_string()))?;
        let c = &self.compress;
        for rho in [c.rho_device, c.rho_server].iter().chain(&c.rhos) {
            if !(0.0..1.0).contains(rho) {
                return Err(cfg_err(format!("pruning ratio {rho} outside [0, 1)")));
            }
        }
        if !(2..=16).contains(&c.bits) {
            return Err(cfg_err(format!("bit width {} outside 2..=16", c.bits)));
        }
        if !(c.lambda > 0.0 && c.lambda <= 1.0) {
            return Err(cfg_err(format!("lambda {} outside (0, 1]", c.lambda)));
        }
        if self.data.snr_db.is_empty() {
            return Err(cfg_err("data.snr_db is empty"));
        }
        if self.data.sps == 0 {
            return Err(cfg_err("data.sps must be at least 1"));
        }
        if self.train.epochs == 0 {
            return Err(cfg_err("train.epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn mods(&self) -> Result<Vec<ModType>, CliError> {
        if self.data.mods.len() < 2 {
            return Err(cfg_err("need at least two modulation classes"));
        }
        self.data
            .mods
            .iter()
            .map(|m| m.parse::<ModType>().map_err(|e| cfg_err(e.to_string())))
            .collect()
    }

    pub fn rule(&self) -> Result<Rule, CliError> {
        match self.train.rule.to_ascii_lowercase().as_str() {
            "adam" => Ok(Rule::Adam),
            "sgd" => Ok(Rule::Sgd),
            other => Err(cfg_err(format!("unknown optimizer rule {other:?}"))),
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig { rule: self.rule().unwrap_or(Rule::Adam), eta: self.train.eta, batch: self.train.batch }
    }

    pub fn link(&self) -> LinkNoise {
        LinkNoise::new(self.link.fwd_snr_db, self.link.bwd_snr_db)
    }

    pub fn ssc(&self) -> SscConfig {
        let m = &self.model;
        SscConfig {
            conv1_kernels: m.conv1_kernels,
            conv1_len: m.conv1_len,
            conv2_kernels: m.conv2_kernels,
            conv2_len: m.conv2_len,
            dropout: m.dropout,
            ..SscConfig::new(self.data.frame_len, m.embed_dim)
        }
    }

    pub fn mc(&self) -> McConfig {
        let m = &self.model;
        McConfig {
            lstm_units: m.lstm_units,
            heads: m.heads,
            head_dim: m.head_dim,
            dense2: m.dense2,
            dropout: m.dropout,
            ..McConfig::new(m.embed_dim, self.data.mods.len())
        }
    }

    /// Synthesis recipe for one split.
    pub fn synth_spec(&self, split: &str, per_class: usize, snrs_db: &[f64]) -> Result<SynthSpec, CliError> {
        let mut spec = SynthSpec::new(self.mods()?, per_class, self.data.frame_len, 0.0, self.derive_seed(split));
        spec.snrs_db = snrs_db.to_vec();
        spec.opts = SynthOptions {
            sps: self.data.sps,
            pulse: self.data.rrc_rolloff.map_or(Pulse::Rect, Pulse::RootRaisedCosine),
            ..SynthOptions::default()
        };
        Ok(spec)
    }

    /// Independent seed for a named purpose.
    pub fn derive_seed(&self, tag: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(tag.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }

    /// Hash with the epoch budget blanked, so a run can be resumed with
    /// more epochs.
    pub fn resume_hash(&self) -> String {
        let mut c = self.clone();
        c.train.epochs = 0;
        c.train.patience = 0;
        c.hash()
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| cfg_err(format!("override {spec:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| cfg_err(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// A TOML value if the text parses as one, a bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
