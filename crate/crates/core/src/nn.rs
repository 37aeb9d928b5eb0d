//! Helpers shared by the encoder and classifier: initialisers, parameter
//! binding and batch-norm bookkeeping.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numcore::{BatchStats, Graph, NodeId, NumError, ParamSet, Real, Role, Tensor};

/// Running-statistic momentum: `running ← m·running + (1−m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

pub(crate) fn glorot<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// `rows×cols` matrix with orthonormal rows (or columns when taller).
pub(crate) fn orthogonal<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let (short, long) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut data = vec![T::zero(); rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &v) in b.iter().enumerate() {
            if rows <= cols {
                data[i * cols + j] = T::lit(v);
            } else {
                data[j * cols + i] = T::lit(v);
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape product")
}

pub(crate) fn insert_bn<T: Real>(p: &mut ParamSet<T>, layer: &str, width: usize) -> Result<(), NumError> {
    p.insert(&format!("{layer}.gamma"), Role::BnAffine, Tensor::full(&[width], T::one()))?;
    p.insert(&format!("{layer}.beta"), Role::BnAffine, Tensor::zeros(&[width]))?;
    p.insert(&format!("{layer}.mean"), Role::BnStat, Tensor::zeros(&[width]))?;
    p.insert(&format!("{layer}.var"), Role::BnStat, Tensor::full(&[width], T::one()))?;
    Ok(())
}

/// Batch statistics gathered from one training-mode forward pass, keyed by
/// batch-norm layer name.
pub type BnUpdates = Vec<(String, BatchStats)>;

/// Lazily creates one graph leaf per parameter.
pub struct Binder<'a, T: Real> {
    params: &'a ParamSet<T>,
    nodes: HashMap<String, NodeId>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(params: &'a ParamSet<T>) -> Self {
        Binder { params, nodes: HashMap::new() }
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<NodeId, NumError> {
        if let Some(&id) = self.nodes.get(name) {
            return Ok(id);
        }
        let id = g.param(self.params.get(name)?);
        self.nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn dense(&mut self, g: &mut Graph<T>, x: NodeId, layer: &str) -> Result<NodeId, NumError> {
        let w = self.get(g, &format!("{layer}.w"))?;
        let b = self.get(g, &format!("{layer}.b"))?;
        g.dense(x, w, Some(b))
    }

    pub fn batch_norm(&mut self, g: &mut Graph<T>, x: NodeId, layer: &str, updates: &mut BnUpdates) -> Result<NodeId, NumError> {
        let gamma = self.get(g, &format!("{layer}.gamma"))?;
        let beta = self.get(g, &format!("{layer}.beta"))?;
        let mean = self.params.value(&format!("{layer}.mean"))?.data().to_vec();
        let var = self.params.value(&format!("{layer}.var"))?.data().to_vec();
        let (y, stats) = g.batch_norm(x, gamma, beta, &mean, &var)?;
        if let Some(s) = stats {
            updates.push((layer.to_string(), s));
        }
        Ok(y)
    }
}

/// Fold batch statistics into the running estimates.
pub fn apply_bn_updates<T: Real>(params: &mut ParamSet<T>, updates: &BnUpdates) -> Result<(), NumError> {
    for (layer, s) in updates {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let p = params.get_mut(&format!("{layer}.{suffix}"))?;
            for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = T::lit(BN_MOMENTUM * r.f64() + (1.0 - BN_MOMENTUM) * b);
            }
        }
    }
    Ok(())
}
