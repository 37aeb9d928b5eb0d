use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::mcnet::{McNet, MC_LAYERS};
use crate::numcore::{ParamSet, Real, Role};
use crate::sscnet::{SscNet, SSC_LAYERS};

use super::CompressError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneOutcome {
    /// `⌊ρN⌋`.
    pub target_zeros: usize,
    /// Positions actually masked; smaller than the target when magnitudes
    /// tie at the threshold.
    pub zeros: usize,
    pub threshold: f64,
}

fn check_ratio(rho: f64) -> Result<(), CompressError> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(CompressError::BadRatio(rho))
    }
}

/// Keep mask for magnitudes: with `k = ⌊ρN⌋`, the threshold is the
/// `(k+1)`-th smallest magnitude and every weight at or above it is kept,
/// so exactly `k` weights are dropped unless magnitudes tie.
fn keep_mask(mags: &[f64], rho: f64) -> (Vec<bool>, PruneOutcome) {
    let n = mags.len();
    let k = ((rho * n as f64).floor() as usize).min(n.saturating_sub(1));
    if k == 0 {
        return (vec![true; n], PruneOutcome { target_zeros: 0, zeros: 0, threshold: 0.0 });
    }
    let mut sorted = mags.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[k];
    let mask: Vec<bool> = mags.iter().map(|&m| m >= threshold).collect();
    let zeros = mask.iter().filter(|&&k| !k).count();
    (mask, PruneOutcome { target_zeros: k, zeros, threshold })
}

/// Zero the `⌊ρN⌋` smallest-magnitude weights (ties at the threshold kept).
pub fn prune_layer(weights: &[f32], rho: f64) -> Result<(Vec<f32>, Vec<bool>, PruneOutcome), CompressError> {
    check_ratio(rho)?;
    let mags: Vec<f64> = weights.iter().map(|w| (*w as f64).abs()).collect();
    let (mask, outcome) = keep_mask(&mags, rho);
    let pruned = weights.iter().zip(&mask).map(|(&w, &k)| if k { w } else { 0.0 }).collect();
    Ok((pruned, mask, outcome))
}

/// Per-layer pruning ratios, keyed by layer name (`conv1`, `lstm2`, …).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneSpec {
    pub ratios: BTreeMap<String, f64>,
}

impl PruneSpec {
    pub fn uniform(layers: &[&str], rho: f64) -> Self {
        PruneSpec { ratios: layers.iter().map(|l| (l.to_string(), rho)).collect() }
    }

    /// One ratio for every encoder layer and another for every classifier
    /// layer.
    pub fn split(device_rho: f64, server_rho: f64) -> Self {
        let mut s = PruneSpec::uniform(&SSC_LAYERS, device_rho);
        s.ratios.extend(MC_LAYERS.iter().map(|l| (l.to_string(), server_rho)));
        s
    }

    pub fn rho(&self, layer: &str) -> f64 {
        self.ratios.get(layer).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSparsity {
    pub layer: String,
    pub weights: usize,
    pub rho: f64,
    pub target_zeros: usize,
    pub zeros: usize,
}

impl LayerSparsity {
    pub fn zero_fraction(&self) -> f64 {
        self.zeros as f64 / self.weights.max(1) as f64
    }

    /// Positions the tie rule kept beyond the target.
    pub fn tie_slack(&self) -> usize {
        self.target_zeros.saturating_sub(self.zeros)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
}

impl SparsityReport {
    pub const CSV_HEADER: &'static str = "layer,weights,rho,target_zeros,zeros,zero_fraction,tie_slack";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{}",
                l.layer,
                l.weights,
                l.rho,
                l.target_zeros,
                l.zeros,
                l.zero_fraction(),
                l.tie_slack()
            );
        }
        s
    }
}

/// Prune every layer in `layers` of one parameter set. A layer's weight
/// set is the union of its weight-role tensors, ranked jointly. Masks are
/// attached to the parameters (and intersected with existing masks) so
/// later updates keep the pruned positions at zero.
pub fn prune_params<T: Real>(
    params: &mut ParamSet<T>,
    layers: &[&str],
    spec: &PruneSpec,
) -> Result<Vec<LayerSparsity>, CompressError> {
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let rho = spec.rho(layer);
        check_ratio(rho)?;
        let names: Vec<String> = params
            .iter()
            .filter(|p| p.role == Role::Weight && p.layer() == layer)
            .map(|p| p.name.clone())
            .collect();
        if names.is_empty() {
            return Err(CompressError::LayerMismatch(format!("no weights in layer {layer}")));
        }
        let mut mags = Vec::new();
        for n in &names {
            mags.extend(params.value(n)?.data().iter().map(|w| w.f64().abs()));
        }
        let (mask, outcome) = keep_mask(&mags, rho);
        let mut offset = 0;
        let mut zeros = 0;
        for n in &names {
            let p = params.get_mut(n)?;
            let len = p.value.numel();
            let mut m = mask[offset..offset + len].to_vec();
            if let Some(old) = &p.mask {
                m.iter_mut().zip(old).for_each(|(a, &b)| *a &= b);
            }
            zeros += m.iter().filter(|&&k| !k).count();
            p.mask = Some(m);
            p.apply_mask();
            offset += len;
        }
        out.push(LayerSparsity { layer: layer.to_string(), weights: mags.len(), rho, target_zeros: outcome.target_zeros, zeros });
    }
    Ok(out)
}

/// Prune both networks. The spec must name exactly the prunable layers of
/// the encoder and the classifier.
pub fn prune_model<T: Real>(
    encoder: &mut SscNet<T>,
    classifier: &mut McNet<T>,
    spec: &PruneSpec,
) -> Result<SparsityReport, CompressError> {
    let known: Vec<&str> = SSC_LAYERS.iter().chain(MC_LAYERS.iter()).copied().collect();
    let unknown: Vec<&String> = spec.ratios.keys().filter(|k| !known.contains(&k.as_str())).collect();
    if !unknown.is_empty() {
        return Err(CompressError::LayerMismatch(format!("unknown layers {unknown:?}")));
    }
    let missing: Vec<&&str> = known.iter().filter(|k| !spec.ratios.contains_key(**k)).collect();
    if !missing.is_empty() {
        return Err(CompressError::LayerMismatch(format!("missing ratios for {missing:?}")));
    }
    let mut layers = prune_params(&mut encoder.params, &SSC_LAYERS, spec)?;
    layers.extend(prune_params(&mut classifier.params, &MC_LAYERS, spec)?);
    Ok(SparsityReport { layers })
}
