use camc_core::mcnet::{attention_head, bilstm, McConfig, McNet};
use camc_core::nn::Binder;
use camc_core::numcore::rng::stream;
use camc_core::numcore::{grad_check, Graph, Mode, OpKind, ParamSet, Role, Tensor};
use camc_core::sigsynth::ApFrame;
use camc_core::sscnet::{SscConfig, SscNet};
use proptest::prelude::*;

fn frame(len: usize, seed: u64) -> ApFrame {
    use rand::Rng;
    let mut r = stream(seed, "frame");
    ApFrame { data: (0..2 * len).map(|_| r.random_range(-1.0f32..1.0)).collect() }
}

#[test]
fn encoder_parameter_count_desk_and_reference_configs() {
    let cfg = SscConfig::new(512, 64);
    let net = SscNet::<f32>::build(cfg.clone(), &mut stream(1, "w")).unwrap();
    assert_eq!(net.params.count_total(), cfg.param_count(true));
    assert_eq!(net.params.count_total(), 20_000);
    assert_eq!(net.params.count_trainable(), 19_808);
    assert_eq!(cfg.weight_count(), 19_456);
    assert_eq!(net.params.value("conv1.w").unwrap().numel() + 64, 1088);
    assert_eq!(net.params.value("conv2.w").unwrap().numel() + 32, 16_416);
    let rel = (net.params.count_total() as f64 - 20_000.0).abs() / 20_000.0;
    assert!(rel <= 0.10);

    let small = SscConfig::new(128, 16);
    let net = SscNet::<f32>::build(small, &mut stream(1, "w")).unwrap();
    let dense = net.params.value("dense.w").unwrap().numel() + net.params.value("dense.b").unwrap().numel();
    assert_eq!(dense, 528);
}

#[test]
fn encoder_feature_maps_keep_frame_length() {
    let net = SscNet::<f32>::build(SscConfig::new(64, 8), &mut stream(2, "w")).unwrap();
    let mut g = Graph::new(Mode::Train);
    let x = g.input(camc_core::sscnet::ap_batch(&[frame(64, 1), frame(64, 2)], 64).unwrap());
    let out = net.forward(&mut g, x, &mut stream(2, "d"), &mut Vec::new()).unwrap();
    let conv: Vec<Vec<usize>> = g.node_ids().filter(|&i| g.op_kind(i) == OpKind::Conv1d).map(|i| g.shape(i).to_vec()).collect();
    assert_eq!(conv, vec![vec![2, 64, 64], vec![2, 64, 32]]);
    assert_eq!(g.shape(out), &[2, 8]);
}

#[test]
fn scalar_embedding_config() {
    let net = SscNet::<f32>::build(SscConfig::new(16, 1), &mut stream(3, "w")).unwrap();
    let e = net.encode(&[frame(16, 1)], Mode::Infer, &mut stream(0, "d")).unwrap();
    assert_eq!(e.shape(), &[1, 1]);
    assert!(SscNet::<f32>::build(SscConfig::new(16, 0), &mut stream(3, "w")).is_err());
    assert!(SscNet::<f32>::build(SscConfig::new(4, 9), &mut stream(3, "w")).is_err());
}

#[test]
fn encode_determinism_and_length_check() {
    let net = SscNet::<f32>::build(SscConfig::new(32, 4), &mut stream(4, "w")).unwrap();
    let f = frame(32, 9);
    let a = net.encode(&[f.clone()], Mode::Infer, &mut stream(0, "d")).unwrap();
    let b = net.encode(&[f.clone()], Mode::Infer, &mut stream(77, "d")).unwrap();
    assert_eq!(a, b);

    let zero = ApFrame { data: vec![0.0; 64] };
    let z1 = net.encode(&[zero.clone()], Mode::Infer, &mut stream(0, "d")).unwrap();
    let z2 = net.encode(&[zero.clone(), zero], Mode::Infer, &mut stream(0, "d")).unwrap();
    assert_eq!(z1.data(), &z2.data()[..4]);
    assert_eq!(&z2.data()[..4], &z2.data()[4..]);

    let t1 = net.encode(&[f.clone(), frame(32, 3)], Mode::Train, &mut stream(5, "d")).unwrap();
    let t2 = net.encode(&[f.clone(), frame(32, 3)], Mode::Train, &mut stream(5, "d")).unwrap();
    assert_eq!(t1, t2);

    let err = net.encode(&[frame(31, 1)], Mode::Infer, &mut stream(0, "d")).unwrap_err().to_string();
    assert!(err.contains("length 31"), "{err}");
}

#[test]
fn encoder_output_is_finite_on_extreme_inputs() {
    let net = SscNet::<f32>::build(SscConfig::new(32, 4), &mut stream(4, "w")).unwrap();
    let big = ApFrame { data: (0..64).map(|i| if i % 2 == 0 { 1e6 } else { 3.14 }).collect() };
    let e = net.encode(&[big], Mode::Infer, &mut stream(0, "d")).unwrap();
    assert!(e.is_finite());
}

fn tiny_mc(m: usize) -> McConfig {
    McConfig { embed_dim: 5, num_classes: m, lstm_units: 4, heads: 2, head_dim: 4, dense2: 6, dropout: 0.5 }
}

#[test]
fn classifier_builds_and_reports_size() {
    let cfg = McConfig::new(64, 11);
    let net = McNet::<f32>::build(cfg.clone(), &mut stream(5, "w")).unwrap();
    assert_eq!(net.params.count_total(), cfg.param_count(true));
    assert_eq!(net.params.count_total(), 235_147);
    let cfg2 = McConfig::new(16, 2);
    let net2 = McNet::<f32>::build(cfg2, &mut stream(5, "w")).unwrap();
    let p = net2.classify(&Tensor::zeros(&[3, 16]), Mode::Infer, &mut stream(0, "d")).unwrap();
    assert_eq!(p.shape(), &[3, 2]);
    let bad = McConfig { heads: 3, ..McConfig::new(16, 4) };
    assert!(McNet::<f32>::build(bad, &mut stream(5, "w")).is_err());
}

#[test]
fn first_bilstm_output_is_sequence_by_128() {
    let net = McNet::<f32>::build(McConfig::new(12, 4), &mut stream(6, "w")).unwrap();
    let mut g = Graph::new(Mode::Infer);
    let y = g.input(Tensor::zeros(&[1, 12]));
    net.forward(&mut g, y, &mut stream(0, "d"), &mut Vec::new()).unwrap();
    let concats: Vec<Vec<usize>> = g.node_ids().filter(|&i| g.op_kind(i) == OpKind::Concat).map(|i| g.shape(i).to_vec()).collect();
    // 12 per-step [h_F, h_B] rows, then e, then the attention heads
    assert_eq!(concats.iter().filter(|s| **s == vec![1, 128]).count(), 14);
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let mut net = McNet::<f32>::build(McConfig::new(8, 5), &mut stream(7, "w")).unwrap();
    net.params.get_mut("dense3.w").unwrap().value.data_mut().fill(0.0);
    let y = Tensor::new(vec![2, 8], (0..16).map(|i| i as f32 * 0.3 - 2.0).collect()).unwrap();
    let p = net.classify(&y, Mode::Infer, &mut stream(0, "d")).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.2));
}

#[test]
fn infer_mode_is_deterministic_and_dropout_free() {
    let cfg = McConfig::new(8, 4);
    let net = McNet::<f32>::build(cfg.clone(), &mut stream(8, "w")).unwrap();
    let y = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f32).sin()).collect()).unwrap();
    let a = net.classify(&y, Mode::Infer, &mut stream(1, "d")).unwrap();
    let b = net.classify(&y, Mode::Infer, &mut stream(2, "d")).unwrap();
    assert_eq!(a, b);
    let no_drop = McNet { config: McConfig { dropout: 0.0, ..cfg }, params: net.params.clone() };
    assert_eq!(no_drop.classify(&y, Mode::Infer, &mut stream(3, "d")).unwrap(), a);
    for row in a.data().chunks(4) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn permuting_output_rows_permutes_probabilities() {
    let net = McNet::<f64>::build(McConfig::new(6, 4), &mut stream(9, "w")).unwrap();
    let perm = [2usize, 0, 3, 1];
    let mut permuted = net.clone();
    {
        let w = net.params.value("dense3.w").unwrap();
        let b = net.params.value("dense3.b").unwrap();
        let pw = &mut permuted.params.get_mut("dense3.w").unwrap().value;
        for r in 0..w.shape()[0] {
            for (new, &old) in perm.iter().enumerate() {
                pw.data_mut()[r * 4 + new] = w.data()[r * 4 + old];
            }
        }
        let pb = &mut permuted.params.get_mut("dense3.b").unwrap().value;
        for (new, &old) in perm.iter().enumerate() {
            pb.data_mut()[new] = b.data()[old];
        }
    }
    let y = Tensor::from_f64(&[2, 6], &[0.1, -0.2, 0.3, 0.5, -1.0, 0.7, 1.0, 0.0, -0.4, 0.2, 0.2, -0.3]).unwrap();
    let p = net.classify(&y, Mode::Infer, &mut stream(0, "d")).unwrap();
    let q = permuted.classify(&y, Mode::Infer, &mut stream(0, "d")).unwrap();
    for row in 0..2 {
        for (new, &old) in perm.iter().enumerate() {
            assert!((q.data()[row * 4 + new] - p.data()[row * 4 + old]).abs() < 1e-15);
        }
    }
}

#[test]
fn singleton_attention_head_is_value_projection() {
    let mut r = stream(10, "att");
    use rand::Rng;
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::<f64>::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let e = rand_t(&[1, 128]);
    let (wq, wk, wv) = (rand_t(&[128, 16]), rand_t(&[128, 16]), rand_t(&[128, 16]));
    let out = attention_head(&e, &wq, &wk, &wv).unwrap();
    for j in 0..16 {
        let expect: f64 = (0..128).map(|i| e.data()[i] * wv.data()[i * 16 + j]).sum();
        assert!((out.data()[j] - expect).abs() < 1e-12);
    }
    let zero = attention_head(&e, &wq, &wk, &Tensor::zeros(&[128, 16])).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));

    // d_A = 1 by hand: softmax over one key is 1, output = e·w_v
    let e1 = Tensor::<f64>::from_f64(&[1, 2], &[2.0, -1.0]).unwrap();
    let q1 = Tensor::from_f64(&[2, 1], &[0.3, 0.9]).unwrap();
    let k1 = Tensor::from_f64(&[2, 1], &[-5.0, 4.0]).unwrap();
    let v1 = Tensor::from_f64(&[2, 1], &[0.5, 0.25]).unwrap();
    assert_eq!(attention_head(&e1, &q1, &k1, &v1).unwrap().data(), &[0.75]);
}

#[test]
fn bilstm_directional_symmetry() {
    let net = McNet::<f64>::build(tiny_mc(3), &mut stream(11, "w")).unwrap();
    let seq: Vec<f64> = vec![0.3, -0.8, 1.2, 0.1, -0.5];
    let run = |params: &ParamSet<f64>, fwd: &str, bwd: &str, values: &[f64]| {
        let mut g = Graph::new(Mode::Infer);
        let mut b = Binder::new(params);
        let steps: Vec<_> = values.iter().map(|&v| g.input(Tensor::from_f64(&[1, 1], &[v]).unwrap())).collect();
        let (f, bk) = bilstm(&mut g, &mut b, fwd, bwd, &steps).unwrap();
        let grab = |ids: Vec<_>| ids.into_iter().map(|i| g.value(i).data().to_vec()).collect::<Vec<_>>();
        (grab(f), grab(bk))
    };
    let (hf, hb) = run(&net.params, "lstm1.fwd", "lstm1.bwd", &seq);
    let reversed: Vec<f64> = seq.iter().rev().copied().collect();
    let (hf2, hb2) = run(&net.params, "lstm1.bwd", "lstm1.fwd", &reversed);
    let n = seq.len();
    for i in 0..n {
        assert_eq!(hf[i], hb2[n - 1 - i]);
        assert_eq!(hb[i], hf2[n - 1 - i]);
    }
}

#[test]
fn composed_model_passes_gradient_check() {
    let ssc = SscNet::<f64>::build(
        SscConfig { conv1_kernels: 3, conv2_kernels: 2, conv1_len: 3, conv2_len: 2, ..SscConfig::new(6, 5) },
        &mut stream(12, "w"),
    )
    .unwrap();
    let mc = McNet::<f64>::build(tiny_mc(3), &mut stream(12, "w2")).unwrap();
    let mut params = ssc.params.clone();
    for p in mc.params.iter() {
        params.insert(&p.name, p.role, p.value.clone()).unwrap();
    }
    use rand::Rng;
    let mut r = stream(12, "x");
    // zero biases put padded windows exactly on the ReLU kink
    for p in params.iter_mut().filter(|p| p.role == Role::Bias) {
        p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
    }
    let x = Tensor::<f64>::new(vec![3, 6, 2], (0..36).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let labels = [0usize, 2, 1];
    for mode in [Mode::Train, Mode::Infer] {
        let report = grad_check(&params, mode, 1e-5, 1e-4, |g, ps| {
            let s = SscNet { config: ssc.config.clone(), params: ps.clone() };
            let m = McNet { config: mc.config.clone(), params: ps.clone() };
            let xi = g.input(x.clone());
            let mut bn = Vec::new();
            let e = s.forward(g, xi, &mut stream(3, "drop"), &mut bn)?;
            let l = m.forward(g, e, &mut stream(4, "drop"), &mut bn)?;
            g.softmax_cce(l, &labels)
        })
        .unwrap();
        assert!(report.passed(), "{mode:?}: {:?}", report.failing().collect::<Vec<_>>());
        assert!(report.blocks.len() > 20);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_count_matches_closed_form(l in 1usize..600, n in 1usize..100, k1 in 1usize..12, k2 in 1usize..12) {
        prop_assume!(2 * l >= n);
        let cfg = SscConfig { conv1_len: k1, conv2_len: k2, ..SscConfig::new(l, n) };
        let net = SscNet::<f32>::build(cfg.clone(), &mut stream(0, "w")).unwrap();
        prop_assert_eq!(net.params.count_total(), cfg.param_count(true));
        prop_assert_eq!(net.params.count_trainable(), cfg.param_count(false));
        let expect = (2 * k1 * 64 + 64) + (64 * k2 * 32 + 32) + 4 * 32 + (32 * n + n) + 4 * n;
        prop_assert_eq!(cfg.param_count(true), expect);
    }

    #[test]
    fn classifier_probabilities_are_normalised(vals in proptest::collection::vec(-30.0f32..30.0, 10)) {
        let net = McNet::<f32>::build(tiny_mc(4), &mut stream(13, "w")).unwrap();
        let p = net.classify(&Tensor::new(vec![2, 5], vals).unwrap(), Mode::Infer, &mut stream(0, "d")).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
