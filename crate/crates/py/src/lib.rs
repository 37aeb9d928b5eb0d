//! Python bindings: datasets, gradient probes and a config-driven
//! experiment (train, evaluate, compress).

use camc_cli::pipeline::{self, Splits};
use camc_cli::{CliError, ExperimentConfig};
use camc_core::numcore::probes;
use camc_core::sigsynth::{self, ModType};
use camc_core::splittrain::{DeviceEnd, ServerEnd};
use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::{json, Value};

fn err(e: CliError) -> PyErr {
    match e {
        CliError::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    let loads = py.import("json")?.getattr("loads")?;
    Ok(loads.call1((v.to_string(),))?.unbind())
}

/// A CAMCDS01 dataset held in memory.
#[pyclass(name = "Dataset", module = "camc")]
struct PyDataset {
    inner: sigsynth::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (mods, frames_per_class, frame_len=128, snrs_db=vec![10.0], seed=7))]
    fn synth(mods: Vec<String>, frames_per_class: usize, frame_len: usize, snrs_db: Vec<f64>, seed: u64) -> PyResult<Self> {
        let mods = mods
            .iter()
            .map(|m| m.parse::<ModType>().map_err(|e| PyValueError::new_err(e.to_string())))
            .collect::<PyResult<Vec<_>>>()?;
        let mut spec = sigsynth::SynthSpec::new(mods, frames_per_class, frame_len, 0.0, seed);
        spec.snrs_db = snrs_db;
        let inner = sigsynth::synth_dataset(&spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = sigsynth::load_dataset(path).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(PyDataset { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        sigsynth::save_dataset(&self.inner, path).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.clone()
    }

    #[getter]
    fn frame_len(&self) -> usize {
        self.inner.frame_len
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    /// `(iq, label, snr_db)`; `iq` interleaves I and Q.
    fn frame(&self, i: usize) -> PyResult<(Vec<f32>, u8, i16)> {
        let r = self.inner.records.get(i).ok_or_else(|| PyIndexError::new_err(format!("frame {i} out of range")))?;
        Ok((r.iq.clone(), r.label, r.snr_db))
    }
}

/// Names accepted by `gradient_check`.
#[pyfunction]
fn primitives() -> Vec<&'static str> {
    probes::PRIMITIVES.to_vec()
}

/// Finite-difference check of one primitive; returns the worst relative
/// error per parameter block.
#[pyfunction]
#[pyo3(signature = (name, draws=10, seed=2024, eps=1e-3, tolerance=1e-3))]
fn gradient_check(py: Python<'_>, name: &str, draws: usize, seed: u64, eps: f64, tolerance: f64) -> PyResult<Py<PyAny>> {
    let r = probes::check_primitive(name, draws, seed, eps, tolerance).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let blocks: Vec<Value> = r
        .blocks
        .iter()
        .map(|b| json!({"name": b.name, "max_rel_err": b.max_rel_err, "passed": b.passed}))
        .collect();
    to_py(py, &json!({"passed": r.passed(), "tolerance": r.tolerance, "blocks": blocks}))
}

/// One configured experiment. The config is the same TOML the `camc`
/// binary reads; `overrides` take `section.key=value`.
#[pyclass(name = "Experiment", module = "camc", unsendable)]
struct Experiment {
    cfg: ExperimentConfig,
    splits: Option<Splits>,
    ends: Option<(DeviceEnd<f32>, ServerEnd<f32>)>,
}

impl Experiment {
    fn splits(&mut self) -> PyResult<&Splits> {
        if self.splits.is_none() {
            self.splits = Some(Splits::load(&self.cfg).map_err(err)?);
        }
        Ok(self.splits.as_ref().unwrap())
    }

    fn trained(&self) -> PyResult<&(DeviceEnd<f32>, ServerEnd<f32>)> {
        self.ends.as_ref().ok_or_else(|| PyRuntimeError::new_err("train() first"))
    }
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (toml=None, overrides=vec![]))]
    fn new(toml: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = match toml {
            None => ExperimentConfig::load(None, &overrides).map_err(err)?,
            Some(t) if overrides.is_empty() => ExperimentConfig::from_toml(t).map_err(err)?,
            Some(t) => {
                // overrides are applied to a config file
                let path = std::env::temp_dir().join(format!("camc-py-{}.toml", std::process::id()));
                std::fs::write(&path, t)?;
                let cfg = ExperimentConfig::load(Some(&path), &overrides);
                let _ = std::fs::remove_file(&path);
                cfg.map_err(err)?
            }
        };
        cfg.validate().map_err(err)?;
        Ok(Experiment { cfg, splits: None, ends: None })
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.cfg.hash()
    }

    fn config_toml(&self) -> String {
        self.cfg.to_toml()
    }

    /// Offline split training; returns per-epoch records and the best epoch.
    fn train(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let cfg = self.cfg.clone();
        let splits = self.splits()?;
        let t = pipeline::train(&cfg, splits, None, false).map_err(err)?;
        let report = serde_json::to_value(&t.report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        self.ends = Some((t.device, t.server));
        to_py(py, &report)
    }

    /// Test-split accuracy through a link at `link_snr_db` (default: the
    /// configured forward SNR).
    #[pyo3(signature = (link_snr_db=None))]
    fn evaluate(&mut self, py: Python<'_>, link_snr_db: Option<f64>) -> PyResult<Py<PyAny>> {
        let link = link_snr_db.unwrap_or(self.cfg.link.fwd_snr_db);
        self.splits()?;
        let (d, s) = self.trained()?;
        let ev = pipeline::eval_at(&self.cfg, &d.net, &s.net, &self.splits.as_ref().unwrap().test, link).map_err(err)?;
        let by_snr: Vec<Value> = ev.by_snr.iter().map(|&(snr, c, t)| json!([snr, c, t])).collect();
        to_py(
            py,
            &json!({"loss": ev.loss, "accuracy": ev.accuracy, "confusion": ev.confusion.counts, "classes": ev.confusion.classes, "by_snr": by_snr}),
        )
    }

    /// `(sensing_snr_db, accuracy)` pairs.
    fn snr_sweep(&self) -> PyResult<Vec<(f64, f64)>> {
        let (d, s) = self.trained()?;
        let pts = pipeline::snr_sweep(&self.cfg, &d.net, &s.net).map_err(err)?;
        Ok(pts.into_iter().map(|(snr, c, t)| (snr, c as f64 / t.max(1) as f64)).collect())
    }

    /// Prune, fine-tune, quantize and reload; returns ratios, per-layer
    /// sparsity and the quantized device file.
    fn compress(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let cfg = self.cfg.clone();
        self.splits()?;
        let (d, s) = self.trained()?;
        let c = pipeline::compress(&cfg, &d.net, &s.net, self.splits.as_ref().unwrap()).map_err(err)?;
        let layers: Vec<Value> = c
            .sparsity
            .layers
            .iter()
            .map(|l| json!({"layer": l.layer, "weights": l.weights, "rho": l.rho, "zeros": l.zeros, "target_zeros": l.target_zeros}))
            .collect();
        let ratios = serde_json::to_value(&c.ratios).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let out = to_py(py, &json!({"ratios": ratios, "sparsity": layers}))?;
        out.bind(py).set_item("device_file", pyo3::types::PyBytes::new(py, &c.files.0))?;
        Ok(out)
    }
}

#[pymodule]
fn camc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(primitives, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}
