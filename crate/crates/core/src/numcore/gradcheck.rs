use super::{Graph, Mode, NodeId, NumError, ParamSet, Real};

/// Largest parameter count the finite-difference oracle will walk.
pub const MAX_CHECKED_PARAMS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct BlockError {
    pub name: String,
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|)` over the block.
    pub max_rel_err: f64,
    /// Largest gradient magnitude seen in the block (either estimate).
    pub scale: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockError> {
        self.blocks.iter().filter(|b| !b.passed)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compare back-propagated gradients with central finite differences.
///
/// `loss` rebuilds the graph from `params` and returns a scalar node. It must
/// be deterministic: any dropout generator has to be reseeded on each call.
pub fn grad_check<T, F>(
    params: &ParamSet<T>,
    mode: Mode,
    eps: f64,
    tolerance: f64,
    loss: F,
) -> Result<GradCheckReport, NumError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> Result<NodeId, NumError>,
{
    let total = params.count_trainable();
    if total >= MAX_CHECKED_PARAMS {
        return Err(NumError::Shape(format!(
            "grad_check: {total} trainable parameters exceeds the oracle budget of {MAX_CHECKED_PARAMS}"
        )));
    }
    let mut g = Graph::new(mode);
    let out = loss(&mut g, params)?;
    g.backward(out)?;
    let analytic = g.param_grads();

    let eval = |ps: &ParamSet<T>| -> Result<f64, NumError> {
        let mut g = Graph::new(mode);
        let out = loss(&mut g, ps)?;
        Ok(g.value(out).data()[0].f64())
    };

    let mut blocks = Vec::new();
    let mut probe = params.clone();
    for (name, grad) in analytic {
        let n = grad.numel();
        let mut numeric = vec![0.0f64; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.get(&name)?.value.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = orig + T::lit(eps);
            let up = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig - T::lit(eps);
            let down = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let scale = grad
            .data()
            .iter()
            .map(|a| a.f64().abs())
            .chain(numeric.iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        let diff = grad
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a.f64() - b).abs())
            .fold(0.0, f64::max);
        let max_rel_err = if scale > 0.0 { diff / scale } else { 0.0 };
        blocks.push(BlockError { name, max_rel_err, scale, passed: max_rel_err < tolerance });
    }
    Ok(GradCheckReport { tolerance, blocks })
}
