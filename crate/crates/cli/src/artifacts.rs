use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const HASH_COLUMN: &str = "config_hash";

/// Golden headers of every CSV the harness writes. The config hash is
/// always the last column.
pub mod headers {
    pub const TRAIN_LOG: &str = "epoch,split,loss,acc,config_hash";
    pub const ACC_VS_SNR: &str = "snr_db,correct,total,accuracy,config_hash";
    pub const SNR_GRID: &str = "sensing_snr_db,link_snr_db,correct,total,accuracy,config_hash";
    pub const PRUNE_SWEEP: &str = "setting,rho,accuracy,config_hash";
    pub const SPARSITY: &str = "layer,weights,rho,target_zeros,zeros,zero_fraction,tie_slack,config_hash";
    pub const FLOPS: &str = "layer,side,kind,dims,weights,rho,flops,flops_literal,config_hash";
    pub const COMPRESSION: &str = "metric,value,config_hash";
    pub const ONLINE: &str = "step,online_loss,offline_loss,config_hash";
}

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub hash: String,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, hash: String) -> Self {
        RunDir { root: root.into(), hash }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn dataset(&self, split: &str) -> PathBuf {
        self.path(&format!("data/{split}.camcds"))
    }

    /// `which` is `best`, `last` or `online`.
    pub fn checkpoint(&self, which: &str, name: &str) -> PathBuf {
        self.path(&format!("checkpoints/{which}/{name}.camcw"))
    }

    pub fn quantized(&self, side: &str) -> PathBuf {
        self.path(&format!("checkpoints/compressed/{side}.camcq"))
    }

    pub fn ensure(&self, rel: &Path) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    /// Write a CSV with the given header; the config hash column is
    /// appended to every row.
    pub fn write_csv(&self, rel: &str, header: &str, rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let path = self.ensure(Path::new(rel))?;
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header.split(','))?;
        for r in rows {
            let mut rec = r.clone();
            rec.push(self.hash.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        self.record(rel)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf, CliError> {
        let path = self.ensure(Path::new(rel))?;
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        self.record(rel)?;
        Ok(path)
    }

    fn manifest_path(&self) -> PathBuf {
        self.path("manifest.json")
    }

    pub fn manifest(&self) -> Result<Manifest, CliError> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(Manifest { config_hash: self.hash.clone(), artifacts: BTreeMap::new() });
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    /// Enter `rel` (already written) in the manifest with its checksum.
    /// A manifest from a different config is replaced.
    pub fn record(&self, rel: &str) -> Result<(), CliError> {
        let mut m = self.manifest()?;
        if m.config_hash != self.hash {
            log::warn!("run directory held artifacts of config {}; starting a new manifest", m.config_hash);
            m = Manifest { config_hash: self.hash.clone(), artifacts: BTreeMap::new() };
        }
        m.artifacts.insert(rel.to_string(), file_sha256(&self.path(rel))?);
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.manifest_path(), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Relative path → SHA-256 of the file contents.
    pub artifacts: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// A CSV written by the harness, read back for reports.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r.records().map(|rec| rec.map(|x| x.iter().map(String::from).collect())).collect::<Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Other(format!("missing column {name:?}")))
    }

    /// Distinct config hashes in the table.
    pub fn hashes(&self) -> Result<Vec<String>, CliError> {
        let c = self.column(HASH_COLUMN)?;
        let mut out: Vec<String> = self.rows.iter().map(|r| r[c].clone()).collect();
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn floats(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .map(|r| r[c].parse::<f64>().map_err(|e| CliError::Other(format!("column {name}: {e}"))))
            .collect()
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>, CliError> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[c].clone()).collect())
    }
}
