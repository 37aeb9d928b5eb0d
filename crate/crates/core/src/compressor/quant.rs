use crate::numcore::{ParamSet, Real, Role};

use super::CompressError;

/// `b`-bit affine quantizer: `q = clamp(round(w/S) + Z, 0, 2^b − 1)`,
/// `w̃ = S·(q − Z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub scale: f64,
    pub zero_point: i32,
    /// The quantized range was degenerate (all kept weights zero).
    pub constant: bool,
}

impl QuantParams {
    pub fn levels(&self) -> u32 {
        ((1u64 << self.bits) - 1) as u32
    }

    pub fn code(&self, w: f64) -> u32 {
        let q = (w / self.scale).round() + self.zero_point as f64;
        q.clamp(0.0, self.levels() as f64) as u32
    }

    pub fn value(&self, q: u32) -> f64 {
        self.scale * (q as f64 - self.zero_point as f64)
    }
}

fn check_bits(bits: u8) -> Result<(), CompressError> {
    if (2..=16).contains(&bits) {
        Ok(())
    } else {
        Err(CompressError::BadBits(bits))
    }
}

/// Scale and zero point for values spanning `[min, max]`. The range is
/// widened to contain zero so that the zero point is itself a code and
/// never needs clamping.
pub fn quant_params(values: impl IntoIterator<Item = f64>, bits: u8) -> Result<QuantParams, CompressError> {
    check_bits(bits)?;
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    let mut any = false;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        any = true;
    }
    if !any {
        return Err(CompressError::Empty);
    }
    if hi == lo {
        return Ok(QuantParams { bits, scale: 1.0, zero_point: 0, constant: true });
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let scale = (hi - lo) / levels;
    let zero_point = (-(levels * lo / (hi - lo)).round()).clamp(0.0, levels) as i32;
    Ok(QuantParams { bits, scale, zero_point, constant: false })
}

/// Codes for the kept weights (all weights when `mask` is `None`), in
/// order.
pub fn quantize_layer(weights: &[f32], mask: Option<&[bool]>, bits: u8) -> Result<(Vec<u32>, QuantParams), CompressError> {
    let kept = || weights.iter().enumerate().filter(move |(i, _)| mask.is_none_or(|m| m[*i])).map(|(_, &w)| w as f64);
    let qp = quant_params(kept(), bits)?;
    Ok((kept().map(|w| qp.code(w)).collect(), qp))
}

/// Expand codes back into a dense weight vector of length `mask.len()`
/// (or `codes.len()` without a mask); pruned positions are zero.
pub fn dequantize(codes: &[u32], qp: &QuantParams, mask: Option<&[bool]>, len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len];
    let mut it = codes.iter();
    for (i, slot) in out.iter_mut().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            if let Some(&q) = it.next() {
                *slot = qp.value(q) as f32;
            }
        }
    }
    out
}

/// Simulated quantization: replace every weight tensor by its quantized
/// then dequantized values. Biases and batch-norm entries are untouched.
pub fn fake_quantize<T: Real>(params: &mut ParamSet<T>, bits: u8) -> Result<Vec<(String, QuantParams)>, CompressError> {
    let mut out = Vec::new();
    for p in params.iter_mut().filter(|p| p.role == Role::Weight) {
        let w: Vec<f32> = p.value.data().iter().map(|v| v.f64() as f32).collect();
        let (codes, qp) = quantize_layer(&w, p.mask.as_deref(), bits)?;
        let deq = dequantize(&codes, &qp, p.mask.as_deref(), w.len());
        p.value.data_mut().iter_mut().zip(deq).for_each(|(d, v)| *d = T::lit(v as f64));
        out.push((p.name.clone(), qp));
    }
    Ok(out)
}
