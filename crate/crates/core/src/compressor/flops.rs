use std::fmt::Write as _;

use crate::mcnet::McConfig;
use crate::sscnet::SscConfig;

use super::{CompressError, PruneSpec};

/// One prunable layer. `dense` is the term at no pruning; the two readings
/// scale its weight-dependent part by `1−ρ` (kept fraction, the default)
/// or by `ρ` as literally written.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsRow {
    pub layer: String,
    pub device: bool,
    pub kind: &'static str,
    /// Symbol values used, e.g. `D=512 N_W=1024`.
    pub dims: String,
    pub weights: usize,
    pub rho: f64,
    pub scaled: f64,
    /// Part of the term that does not depend on the weights (attention
    /// score products).
    pub fixed: f64,
}

impl FlopsRow {
    pub fn kept(&self) -> f64 {
        (1.0 - self.rho) * self.scaled + self.fixed
    }

    pub fn literal(&self) -> f64 {
        self.rho * self.scaled + self.fixed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
    pub lambda: f64,
}

impl FlopsReport {
    fn sum(&self, device: bool, f: fn(&FlopsRow) -> f64) -> f64 {
        self.rows.iter().filter(|r| r.device == device).map(f).sum()
    }

    pub fn device(&self) -> f64 {
        self.sum(true, FlopsRow::kept)
    }

    pub fn server(&self) -> f64 {
        self.sum(false, FlopsRow::kept)
    }

    /// `C_SSC + λ·C_MC`.
    pub fn total(&self) -> f64 {
        self.device() + self.lambda * self.server()
    }

    pub fn device_literal(&self) -> f64 {
        self.sum(true, FlopsRow::literal)
    }

    pub fn server_literal(&self) -> f64 {
        self.sum(false, FlopsRow::literal)
    }

    pub fn total_literal(&self) -> f64 {
        self.device_literal() + self.lambda * self.server_literal()
    }

    pub const CSV_HEADER: &'static str = "layer,side,kind,dims,weights,rho,flops,flops_literal";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let side = if r.device { "device" } else { "server" };
            let _ = writeln!(s, "{},{side},{},{},{},{},{:.0},{:.0}", r.layer, r.kind, r.dims, r.weights, r.rho, r.kept(), r.literal());
        }
        let _ = writeln!(s, "C_SSC,device,total,,,,{:.0},{:.0}", self.device(), self.device_literal());
        let _ = writeln!(s, "C_MC,server,total,,,,{:.0},{:.0}", self.server(), self.server_literal());
        let _ = writeln!(s, "C,lambda={},total,,,,{:.0},{:.0}", self.lambda, self.total(), self.total_literal());
        s
    }
}

fn conv(layer: &str, d: usize, nw: usize, rho: f64) -> FlopsRow {
    FlopsRow {
        layer: layer.into(),
        device: true,
        kind: "conv1d",
        dims: format!("D={d} N_W={nw}"),
        weights: nw,
        rho,
        scaled: 2.0 * d as f64 * nw as f64,
        fixed: 0.0,
    }
}

fn dense(layer: &str, device: bool, nw: usize, rho: f64) -> FlopsRow {
    FlopsRow { layer: layer.into(), device, kind: "dense", dims: format!("N_W={nw}"), weights: nw, rho, scaled: 2.0 * nw as f64, fixed: 0.0 }
}

fn bilstm(layer: &str, steps: usize, kin: usize, kout: usize, rho: f64) -> FlopsRow {
    let per_dir = 4.0 * steps as f64 * (kin * kout + kout * kout) as f64;
    FlopsRow {
        layer: layer.into(),
        device: false,
        kind: "bilstm",
        dims: format!("N={steps} K_Bin={kin} K_Bout={kout}"),
        weights: 2 * 4 * (kin * kout + kout * kout),
        rho,
        scaled: 2.0 * per_dir,
        fixed: 0.0,
    }
}

/// Per-layer complexity of both networks with cost factor `λ ∈ (0, 1]`
/// on the server side.
pub fn flops_report(ssc: &SscConfig, mc: &McConfig, spec: &PruneSpec, lambda: f64) -> Result<FlopsReport, CompressError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(CompressError::BadLambda(lambda));
    }
    for (l, &r) in &spec.ratios {
        if !(0.0..1.0).contains(&r) {
            return Err(CompressError::LayerMismatch(format!("ratio {r} for {l} outside [0, 1)")));
        }
    }
    let d = ssc.frame_len;
    let (k1, k2) = (ssc.conv1_kernels, ssc.conv2_kernels);
    let mut rows = vec![
        conv("conv1", d, ssc.conv1_len * 2 * k1, spec.rho("conv1")),
        conv("conv2", d, ssc.conv2_len * k1 * k2, spec.rho("conv2")),
        dense("dense", true, k2 * ssc.embed_dim, spec.rho("dense")),
    ];
    let (h, w) = (mc.lstm_units, mc.bi_width());
    let (na, da) = (mc.heads, mc.head_dim);
    rows.push(bilstm("lstm1", mc.embed_dim, 1, h, spec.rho("lstm1")));
    rows.push(bilstm("lstm2", mc.embed_dim, w, h, spec.rho("lstm2")));
    rows.push(FlopsRow {
        layer: "att".into(),
        device: false,
        kind: "attention",
        dims: format!("N_A={na} d_A={da} K_Ain={w} K_Aout={w}"),
        weights: 4 * w * na * da,
        rho: spec.rho("att"),
        scaled: (na * da * (3 * w + w)) as f64,
        fixed: (2 * na * da * da) as f64,
    });
    rows.push(dense("dense2", false, w * mc.dense2, spec.rho("dense2")));
    rows.push(dense("dense3", false, mc.dense2 * mc.num_classes, spec.rho("dense3")));
    Ok(FlopsReport { rows, lambda })
}
