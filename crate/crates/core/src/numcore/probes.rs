//! Small randomized graphs, one per primitive, for finite-difference
//! checking. Inputs are registered as parameters so their gradients are
//! checked along with the weights.

use rand::Rng;
use rand_distr::StandardNormal;

use super::rng::{stream, StreamRng};
use super::{grad_check, BlockError, Graph, GradCheckReport, Mode, NodeId, NumError, ParamSet, PoolMode, Role, Tensor};

pub const PRIMITIVES: &[&str] = &[
    "dense",
    "conv1d",
    "conv1d_odd",
    "lstm_cell",
    "batchnorm_train",
    "batchnorm_infer",
    "dropout",
    "relu",
    "selu",
    "softmax",
    "softmax_cce",
    "column_sum_pool",
    "column_mean_pool",
    "column_max_pool",
    "concat",
    "slice",
    "reshape",
    "attention",
    "add",
];

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId, NumError>>;

fn normal(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, so kinked activations are differentiable
/// at every probe point.
fn off_kink(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.05);
    }
    t
}

/// Distinct values spaced well beyond the finite-difference step.
fn spread(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data = order.into_iter().map(|k| k as f64 * 0.1 - n as f64 * 0.05).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weights_for(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut ps = ParamSet::new();
    for (name, t) in entries {
        ps.insert(name, Role::Weight, t).unwrap();
    }
    ps
}

fn p(g: &mut Graph<f64>, ps: &ParamSet<f64>, name: &str) -> Result<NodeId, NumError> {
    Ok(g.param(ps.get(name)?))
}

/// Build one random probe of the named primitive.
pub fn build_case(label: &str, rng: &mut StreamRng) -> Result<(ParamSet<f64>, Mode, LossFn), NumError> {
    let case: (ParamSet<f64>, Mode, LossFn) = match label {
        "dense" => {
            let ps = params(vec![("x", normal(rng, &[3, 4])), ("w", normal(rng, &[4, 5])), ("b", normal(rng, &[5]))]);
            let wts = weights_for(rng, 15);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
                let y = g.dense(x, w, Some(b))?;
                g.sum_product(y, &wts)
            }))
        }
        "conv1d" | "conv1d_odd" => {
            let k = if label == "conv1d" { 4 } else { 3 };
            let ps = params(vec![("x", normal(rng, &[2, 6, 3])), ("w", normal(rng, &[k, 3, 2])), ("b", normal(rng, &[2]))]);
            let wts = weights_for(rng, 24);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
                let y = g.conv1d(x, w, b)?;
                g.sum_product(y, &wts)
            }))
        }
        "lstm_cell" => {
            let mut state = normal(rng, &[2, 8]);
            state.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            let mut w_ih = normal(rng, &[3, 16]);
            let mut w_hh = normal(rng, &[4, 16]);
            w_ih.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            w_hh.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            let ps = params(vec![("x", normal(rng, &[2, 3])), ("state", state), ("w_ih", w_ih), ("w_hh", w_hh), ("b", normal(rng, &[16]))]);
            let wts = weights_for(rng, 16);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let x = p(g, ps, "x")?;
                let s = p(g, ps, "state")?;
                let (wi, wh, b) = (p(g, ps, "w_ih")?, p(g, ps, "w_hh")?, p(g, ps, "b")?);
                let y = g.lstm_cell(x, s, wi, wh, b)?;
                g.sum_product(y, &wts)
            }))
        }
        "batchnorm_train" | "batchnorm_infer" => {
            let mode = if label == "batchnorm_train" { Mode::Train } else { Mode::Infer };
            let ps = params(vec![("x", normal(rng, &[5, 3])), ("gamma", normal(rng, &[3])), ("beta", normal(rng, &[3]))]);
            let rm: Vec<f64> = weights_for(rng, 3);
            let rv: Vec<f64> = weights_for(rng, 3).into_iter().map(|v| v.abs() + 0.5).collect();
            let wts = weights_for(rng, 15);
            (ps, mode, Box::new(move |g, ps| {
                let (x, ga, be) = (p(g, ps, "x")?, p(g, ps, "gamma")?, p(g, ps, "beta")?);
                let (y, _) = g.batch_norm(x, ga, be, &rm, &rv)?;
                g.sum_product(y, &wts)
            }))
        }
        "dropout" => {
            let ps = params(vec![("x", normal(rng, &[4, 5]))]);
            let wts = weights_for(rng, 20);
            let seed: u64 = rng.random();
            (ps, Mode::Train, Box::new(move |g, ps| {
                let x = p(g, ps, "x")?;
                let mut r = stream(seed, "probe-dropout");
                let y = g.dropout(x, 0.5, &mut r)?;
                g.sum_product(y, &wts)
            }))
        }
        "relu" | "selu" => {
            let selu = label == "selu";
            let ps = params(vec![("x", off_kink(rng, &[4, 5]))]);
            let wts = weights_for(rng, 20);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let x = p(g, ps, "x")?;
                let y = if selu { g.selu(x) } else { g.relu(x) };
                g.sum_product(y, &wts)
            }))
        }
        "softmax" => {
            let ps = params(vec![("x", normal(rng, &[3, 4]))]);
            let wts = weights_for(rng, 12);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let x = p(g, ps, "x")?;
                let y = g.softmax(x);
                g.sum_product(y, &wts)
            }))
        }
        "softmax_cce" => {
            let ps = params(vec![("logits", normal(rng, &[4, 5]))]);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            (ps, Mode::Train, Box::new(move |g, ps| {
                let x = p(g, ps, "logits")?;
                g.softmax_cce(x, &labels)
            }))
        }
        "column_sum_pool" | "column_mean_pool" | "column_max_pool" => {
            let mode = match label {
                "column_sum_pool" => PoolMode::Sum,
                "column_mean_pool" => PoolMode::Mean,
                _ => PoolMode::Max,
            };
            let x = if mode == PoolMode::Max { spread(rng, &[2, 5, 3]) } else { normal(rng, &[2, 5, 3]) };
            let ps = params(vec![("x", x)]);
            let wts = weights_for(rng, 6);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let x = p(g, ps, "x")?;
                let y = g.column_pool(x, mode)?;
                g.sum_product(y, &wts)
            }))
        }
        "concat" => {
            let ps = params(vec![("a", normal(rng, &[2, 3])), ("b", normal(rng, &[2, 2]))]);
            let wts = weights_for(rng, 10);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                let y = g.concat(&[a, b])?;
                g.sum_product(y, &wts)
            }))
        }
        "slice" => {
            let ps = params(vec![("x", normal(rng, &[2, 6]))]);
            let wts = weights_for(rng, 6);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let x = p(g, ps, "x")?;
                let y = g.slice(x, 1, 3)?;
                g.sum_product(y, &wts)
            }))
        }
        "reshape" => {
            let ps = params(vec![("x", normal(rng, &[2, 6]))]);
            let wts = weights_for(rng, 12);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let x = p(g, ps, "x")?;
                let y = g.reshape(x, &[3, 4])?;
                let z = g.selu(y);
                g.sum_product(z, &wts)
            }))
        }
        "attention" => {
            let ps = params(vec![("q", normal(rng, &[2, 3, 4])), ("k", normal(rng, &[2, 3, 4])), ("v", normal(rng, &[2, 3, 2]))]);
            let wts = weights_for(rng, 12);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let (q, k, v) = (p(g, ps, "q")?, p(g, ps, "k")?, p(g, ps, "v")?);
                let y = g.attention(q, k, v)?;
                g.sum_product(y, &wts)
            }))
        }
        "add" => {
            let ps = params(vec![("a", normal(rng, &[3, 2])), ("b", normal(rng, &[3, 2]))]);
            let wts = weights_for(rng, 6);
            (ps, Mode::Train, Box::new(move |g, ps| {
                let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                let y = g.add(a, b)?;
                let z = g.softmax(y);
                g.sum_product(z, &wts)
            }))
        }
        other => return Err(NumError::Shape(format!("no probe for primitive {other:?}"))),
    };
    Ok(case)
}

/// Run `draws` independent random probes of one primitive; each block in
/// the returned report carries its worst error over all draws.
pub fn check_primitive(label: &str, draws: usize, seed: u64, eps: f64, tolerance: f64) -> Result<GradCheckReport, NumError> {
    let mut rng = stream(seed, label);
    let mut worst: Vec<BlockError> = Vec::new();
    for _ in 0..draws {
        let (ps, mode, loss) = build_case(label, &mut rng)?;
        let report = grad_check(&ps, mode, eps, tolerance, loss)?;
        for b in report.blocks {
            match worst.iter_mut().find(|w| w.name == b.name) {
                Some(w) if b.max_rel_err > w.max_rel_err => *w = b,
                Some(_) => {}
                None => worst.push(b),
            }
        }
    }
    Ok(GradCheckReport { tolerance, blocks: worst })
}
