use std::collections::HashMap;

use super::{NumError, Real, Tensor};

/// What a parameter entry is for. Stored as a `u8` in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Role {
    Weight = 0,
    Bias = 1,
    /// Running batch-norm statistics. Never trained.
    BnStat = 2,
    /// Batch-norm scale and shift.
    BnAffine = 3,
}

impl Role {
    pub fn from_u8(v: u8) -> Option<Role> {
        match v {
            0 => Some(Role::Weight),
            1 => Some(Role::Bias),
            2 => Some(Role::BnStat),
            3 => Some(Role::BnAffine),
            _ => None,
        }
    }

    pub fn trainable(self) -> bool {
        self != Role::BnStat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub role: Role,
    pub value: Tensor<T>,
    /// Pruning mask, `true` = kept. Masked positions stay exactly zero.
    pub mask: Option<Vec<bool>>,
}

impl<T: Real> Param<T> {
    /// Layer part of a layer-qualified name (`"conv1.weight"` → `"conv1"`).
    pub fn layer(&self) -> &str {
        layer_of(&self.name)
    }

    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, &keep) in self.value.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *w = T::zero();
                }
            }
        }
    }
}

pub fn layer_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Ordered, uniquely named parameter collection of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, role: Role, value: Tensor<T>) -> Result<(), NumError> {
        if self.index.contains_key(name) {
            return Err(NumError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param { name: name.to_string(), role, value, mask: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>, NumError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>, NumError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(NumError::UnknownParam(name.to_string())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>, NumError> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every scalar, running statistics included.
    pub fn count_total(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|p| p.role.trainable()).map(|p| p.value.numel()).sum()
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.entries.iter().filter(|p| p.role == role).map(|p| p.value.numel()).sum()
    }

    /// Layer names in first-appearance order.
    pub fn layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.entries {
            let l = p.layer();
            if !out.iter().any(|x| x == l) {
                out.push(l.to_string());
            }
        }
        out
    }

    pub fn apply_masks(&mut self) {
        self.entries.iter_mut().for_each(Param::apply_mask);
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                    mask: p.mask.clone(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Largest relative difference `|a-b| / max(|a|,|b|)` over all entries.
    pub fn max_rel_diff(&self, other: &ParamSet<T>) -> f64 {
        let mut worst = 0.0f64;
        for p in &self.entries {
            let Ok(q) = other.get(&p.name) else {
                return f64::INFINITY;
            };
            for (&a, &b) in p.value.data().iter().zip(q.value.data()) {
                let (a, b) = (a.f64(), b.f64());
                let denom = a.abs().max(b.abs());
                if denom > 0.0 {
                    worst = worst.max((a - b).abs() / denom);
                }
            }
        }
        worst
    }

    /// Largest per-entry `max|a−b| / max(max|a|, max|b|)`. Unlike
    /// [`ParamSet::max_rel_diff`] this ignores relative noise on values that
    /// are tiny next to the rest of their tensor.
    pub fn max_block_rel_diff(&self, other: &ParamSet<T>) -> f64 {
        let mut worst = 0.0f64;
        for p in &self.entries {
            let Ok(q) = other.get(&p.name) else {
                return f64::INFINITY;
            };
            let (mut diff, mut scale) = (0.0f64, 0.0f64);
            for (&a, &b) in p.value.data().iter().zip(q.value.data()) {
                let (a, b) = (a.f64(), b.f64());
                diff = diff.max((a - b).abs());
                scale = scale.max(a.abs()).max(b.abs());
            }
            if scale > 0.0 {
                worst = worst.max(diff / scale);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("dense.weight", Role::Weight, Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            ps.insert("dense.weight", Role::Bias, Tensor::zeros(&[2])),
            Err(NumError::DuplicateParam(_))
        ));
        assert_eq!(ps.layers(), vec!["dense".to_string()]);
    }

    #[test]
    fn counts_split_by_role() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("bn.gamma", Role::BnAffine, Tensor::zeros(&[4])).unwrap();
        ps.insert("bn.running_mean", Role::BnStat, Tensor::zeros(&[4])).unwrap();
        assert_eq!(ps.count_total(), 8);
        assert_eq!(ps.count_trainable(), 4);
    }
}
