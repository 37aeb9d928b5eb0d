use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numcore::{NumError, ParamSet, Real, Role, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    /// `θ ← θ − η∇θ`.
    Sgd,
    /// Adaptive moments (β₁ = 0.9, β₂ = 0.999, ε = 1e-7).
    Adam,
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rule::Sgd => "sgd",
            Rule::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub rule: Rule,
    pub eta: f64,
    pub batch: usize,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(format!("learning rate must be finite and non-negative, got {}", self.eta));
        }
        if self.batch == 0 {
            return Err("batch size must be at least 1".into());
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { rule: Rule::Adam, eta: 1e-3, batch: 128 }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-7;

/// Per-network optimizer. Masked (pruned) positions get neither gradient
/// nor value.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    steps: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer { config, steps: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &[(String, Tensor<T>)]) -> Result<(), NumError> {
        self.steps += 1;
        let eta = self.config.eta;
        let (c1, c2) = (1.0 - BETA1.powi(self.steps as i32), 1.0 - BETA2.powi(self.steps as i32));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let mask = p.mask.clone();
            let kept = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
            match self.config.rule {
                Rule::Sgd => {
                    for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if kept(i) {
                            *w = *w - T::lit(eta) * gi;
                        }
                    }
                }
                Rule::Adam => {
                    let n = g.numel();
                    let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                    for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if !kept(i) {
                            continue;
                        }
                        let gi = gi.f64();
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        let upd = eta * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                        *w = *w - T::lit(upd);
                    }
                }
            }
            p.apply_mask();
        }
        Ok(())
    }

    /// Moment estimates and step count as a parameter set, for resuming.
    /// Each `f64` moment is stored as the bit patterns of its two 32-bit
    /// halves so that a resumed run continues bit-exactly.
    pub fn state(&self) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        let bits = |x: &[f64]| -> Tensor<f32> {
            let data = x.iter().flat_map(|v| {
                let b = v.to_bits();
                [f32::from_bits((b >> 32) as u32), f32::from_bits(b as u32)]
            });
            Tensor::new(vec![x.len(), 2], data.collect()).expect("two halves per value")
        };
        ps.insert("@steps", Role::BnStat, bits(&[f64::from_bits(self.steps)])).expect("fresh set");
        for name in names {
            let (m, v) = &self.moments[name];
            ps.insert(&format!("@m:{name}"), Role::BnStat, bits(m)).expect("unique");
            ps.insert(&format!("@v:{name}"), Role::BnStat, bits(v)).expect("unique");
        }
        ps
    }

    pub fn load_state(&mut self, ps: &ParamSet<f32>) -> Result<(), NumError> {
        let unbits = |t: &Tensor<f32>| -> Vec<u64> {
            t.data().chunks_exact(2).map(|c| ((c[0].to_bits() as u64) << 32) | c[1].to_bits() as u64).collect()
        };
        let f = |t: &Tensor<f32>| unbits(t).into_iter().map(f64::from_bits).collect::<Vec<f64>>();
        self.steps = *unbits(ps.value("@steps")?).first().ok_or_else(|| NumError::Checkpoint("empty step counter".into()))?;
        self.moments.clear();
        for p in ps.iter() {
            if let Some(name) = p.name.strip_prefix("@m:") {
                let v = ps.value(&format!("@v:{name}"))?;
                self.moments.insert(name.to_string(), (f(&p.value), f(v)));
            }
        }
        Ok(())
    }
}
