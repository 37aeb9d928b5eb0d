use crate::numcore::{ParamSet, Real, Role};

use super::PruneSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionRatios {
    pub device: f64,
    pub server: f64,
    pub total: f64,
}

/// Weight count per listed layer.
pub fn layer_sizes<T: Real>(params: &ParamSet<T>, layers: &[&str]) -> Vec<(String, usize)> {
    layers
        .iter()
        .map(|&l| {
            let n = params.iter().filter(|p| p.role == Role::Weight && p.layer() == l).map(|p| p.value.numel()).sum();
            (l.to_string(), n)
        })
        .collect()
}

fn side(layers: &[(String, usize)], spec: &PruneSpec, bits: u8) -> (f64, usize) {
    let n: usize = layers.iter().map(|(_, c)| c).sum();
    if n == 0 {
        return (1.0, 0);
    }
    let g = layers
        .iter()
        .map(|(l, c)| (*c as f64 / n as f64) / (1.0 - spec.rho(l)))
        .sum::<f64>()
        * 32.0
        / bits as f64;
    (g, n)
}

/// `γ_dev = (32/b)·Σ_l (N_l/N_dev)/(1−ρ_l)`, likewise for the server, and
/// the weight-count-weighted mean of the two.
pub fn compression_ratio(device: &[(String, usize)], server: &[(String, usize)], spec: &PruneSpec, bits: u8) -> CompressionRatios {
    let (gd, nd) = side(device, spec, bits);
    let (gs, ns) = side(server, spec, bits);
    let total = if nd + ns == 0 { 1.0 } else { (nd as f64 * gd + ns as f64 * gs) / (nd + ns) as f64 };
    CompressionRatios { device: gd, server: gs, total }
}
