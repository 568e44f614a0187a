//! Autodiff engine checks: forward oracles for each primitive plus
//! finite-difference verification of every backward rule.

use promptsam::tensorcore::{
    finite_diff_check, FdOutcome, Graph, ParamRegistry, TensorData, TensorError, Var,
    load_weights, save_weights,
};
use proptest::prelude::*;

/// Max relative error between the analytic gradient of a single leaf and
/// central finite differences, for a caller-supplied scalar-loss graph.
fn check_leaf_grad(
    shape: &[usize],
    vals: &[f64],
    build: &dyn Fn(&mut Graph<f64>, Var) -> Var,
) -> f64 {
    let eval = |data: &[f64]| -> f64 {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            TensorData::from_f64_slice(shape, data).unwrap(),
            true,
            Some("x"),
        );
        let loss = build(&mut g, x);
        g.value(loss).scalar_value()
    };

    let mut g = Graph::<f64>::new();
    let x = g.leaf(
        TensorData::from_f64_slice(shape, vals).unwrap(),
        true,
        Some("x"),
    );
    let loss = build(&mut g, x);
    assert_eq!(g.value(loss).numel(), 1, "loss must be scalar");
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(x).expect("leaf gradient");

    let h = 1e-6;
    let mut probe = vals.to_vec();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe);
        probe[i] = orig - h;
        let fm = eval(&probe);
        probe[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let a = gx.data()[i];
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
    }
    worst
}

/// Pseudo-random but deterministic weights so losses are non-degenerate.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((i as f64 * 0.7391 + 0.31).sin() * 1.3) + 0.05)
        .collect()
}

/// Scalar loss `sum(y * w)` with fixed pseudo-random `w`, so every output
/// coordinate of `y` receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Var {
    let n = g.value(y).numel();
    let shape = g.shape(y).to_vec();
    let w = g.constant(TensorData::from_f64_slice(&shape, &probe_weights(n)).unwrap());
    let prod = g.mul(y, w).unwrap();
    g.sum(prod).unwrap()
}

fn vals(strategy_len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0..2.0f64, strategy_len)
}

/// Values bounded away from zero, for kinked ops like relu.
fn vals_off_zero(strategy_len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(
        prop_oneof![-2.0..-0.1f64, 0.1..2.0f64],
        strategy_len,
    )
}

// ---------------------------------------------------------------- forwards

#[test]
fn matmul_identity_and_oracle() {
    let mut g = Graph::<f64>::new();
    let a_vals = probe_weights(12);
    let a = g.constant(TensorData::from_f64_slice(&[3, 4], &a_vals).unwrap());
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let i4 = g.constant(TensorData::from_f64_slice(&[4, 4], &eye).unwrap());
    let prod = g.matmul(a, i4).unwrap();
    assert_eq!(g.value(prod).data(), &a_vals[..]);

    // 2x3 * 3x2 against a hand computation
    let a = g.constant(
        TensorData::from_f64_slice(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
    );
    let b = g.constant(
        TensorData::from_f64_slice(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap(),
    );
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn softmax_uniform_and_rows_sum_to_one() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(TensorData::filled(&[2, 5], 3.7));
    let s = g.softmax(x, 1).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 0.2).abs() < 1e-12);
    }
    let x = g.constant(TensorData::from_f64_slice(&[2, 3], &probe_weights(6)).unwrap());
    let s = g.softmax(x, 1).unwrap();
    let data = g.value(s).data();
    for row in data.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

/// Direct quadruple-loop convolution, coded independently of the graph op.
fn conv_oracle(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    k: &[f64],
    co: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - 3) / stride + 1;
    let ow = (w + 2 * pad - 3) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(c * h + iy as usize) * w + ix as usize]
                                * k[((o * ci + c) * 3 + ky) * 3 + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loops() {
    let x_vals = probe_weights(2 * 5 * 5);
    let k_vals = probe_weights(3 * 2 * 3 * 3);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(TensorData::from_f64_slice(&[2, 5, 5], &x_vals).unwrap());
        let k = g.constant(TensorData::from_f64_slice(&[3, 2, 3, 3], &k_vals).unwrap());
        let y = g.conv2d(x, k, stride, pad).unwrap();
        let expect = conv_oracle(&x_vals, (2, 5, 5), &k_vals, 3, stride, pad);
        assert_eq!(g.value(y).numel(), expect.len());
        for (&a, &b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "stride={stride} pad={pad}");
        }
    }
}

#[test]
fn avg_pool_oracle() {
    let mut g = Graph::<f64>::new();
    let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let x = g.constant(TensorData::from_f64_slice(&[1, 4, 4], &vals).unwrap());
    let y = g.avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);
    assert_eq!(g.value(y).data(), &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn tokens_to_map_layout() {
    let mut g = Graph::<f64>::new();
    let (hp, wp, d) = (2, 3, 4);
    let vals: Vec<f64> = (0..hp * wp * d).map(|i| i as f64).collect();
    let x = g.constant(TensorData::from_f64_slice(&[hp * wp, d], &vals).unwrap());
    let m = g.tokens_to_map(x, hp, wp).unwrap();
    assert_eq!(g.shape(m), &[d, hp, wp]);
    let data = g.value(m).data();
    for y in 0..hp {
        for x in 0..wp {
            for c in 0..d {
                assert_eq!(data[(c * hp + y) * wp + x], ((y * wp + x) * d + c) as f64);
            }
        }
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(TensorData::from_f64_slice(&[3, 8], &probe_weights(24)).unwrap());
    let gamma = g.constant(TensorData::filled(&[8], 1.0));
    let beta = g.constant(TensorData::zeros(&[8]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    for row in g.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }
}

#[test]
fn cross_entropy_uniform_is_ln_k() {
    let mut g = Graph::<f64>::new();
    for k in [2usize, 5, 10] {
        let logits = g.constant(TensorData::filled(&[k], 0.42));
        let l = g.cross_entropy(logits, k - 1).unwrap();
        assert!((g.value(l).scalar_value() - (k as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_grad_is_softmax_minus_onehot() {
    let mut g = Graph::<f64>::new();
    let vals = [0.3, -1.2, 0.8, 0.1];
    let logits = g.leaf(
        TensorData::from_f64_slice(&[4], &vals).unwrap(),
        true,
        None,
    );
    let loss = g.cross_entropy(logits, 2).unwrap();
    let grads = g.backward(loss).unwrap();
    let grad = grads.get(logits).unwrap();
    let z: f64 = vals.iter().map(|v| v.exp()).sum();
    for (i, &gv) in grad.data().iter().enumerate() {
        let expect = vals[i].exp() / z - if i == 2 { 1.0 } else { 0.0 };
        assert!((gv - expect).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- gradients

#[test]
fn grad_of_sum_is_ones() {
    let err = check_leaf_grad(&[2, 3], &probe_weights(6), &|g, x| g.sum(x).unwrap());
    assert!(err < 1e-8);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(TensorData::filled(&[4], 2.0), true, None);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn grad_of_half_square_norm_is_x() {
    let vals = probe_weights(6);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(
        TensorData::from_f64_slice(&[6], &vals).unwrap(),
        true,
        None,
    );
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let loss = g.scale(s, 0.5).unwrap();
    let grads = g.backward(loss).unwrap();
    for (a, b) in grads.get(x).unwrap().data().iter().zip(&vals) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn two_layer_mlp_passes_registry_finite_differences() {
    let mut params = ParamRegistry::<f64>::new();
    params.insert(
        "w1",
        TensorData::from_f64_slice(&[4, 8], &probe_weights(32)).unwrap(),
    );
    params.insert("b1", TensorData::from_f64_slice(&[8], &probe_weights(8)).unwrap());
    params.insert(
        "w2",
        TensorData::from_f64_slice(&[8, 3], &probe_weights(24)).unwrap(),
    );
    params.insert("b2", TensorData::zeros(&[3]));
    params.insert("frozen_w", TensorData::filled(&[2, 2], 1.0));
    params.freeze("frozen_w").unwrap();

    let x_vals = probe_weights(4);
    let run = |p: &ParamRegistry<f64>| -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let x = g.constant(TensorData::from_f64_slice(&[1, 4], &x_vals).unwrap());
        let w1 = p.leaf(&mut g, "w1").unwrap();
        let b1 = p.leaf(&mut g, "b1").unwrap();
        let w2 = p.leaf(&mut g, "w2").unwrap();
        let b2 = p.leaf(&mut g, "b2").unwrap();
        let h = g.matmul(x, w1).unwrap();
        let h = g.add_bias(h, b1).unwrap();
        let h = g.gelu(h).unwrap();
        let o = g.matmul(h, w2).unwrap();
        let o = g.add_bias(o, b2).unwrap();
        let o = g.reshape(o, &[3]).unwrap();
        let loss = g.cross_entropy(o, 1).unwrap();
        (g, loss)
    };
    let (g, loss) = run(&params);
    let analytic = g.backward(loss).unwrap().named(&g);
    assert!(!analytic.contains_key("frozen_w"));

    let report = finite_diff_check(
        &|p| {
            let (g, loss) = run(p);
            g.value(loss).scalar_value()
        },
        &params,
        1e-5,
        &analytic,
    );
    assert!(report.worst() < 1e-4, "worst rel err {}", report.worst());
    assert_eq!(report.per_param["frozen_w"], FdOutcome::Skipped);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_add_and_mul(a in vals(6)) {
        let b = probe_weights(6);
        let err = check_leaf_grad(&[2, 3], &a, &|g, x| {
            let c = g.constant(TensorData::from_f64_slice(&[2, 3], &b).unwrap());
            let s = g.add(x, c).unwrap();
            let p = g.mul(s, c).unwrap();
            weighted_sum(g, p)
        });
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn grad_relu(a in vals_off_zero(8)) {
        let err = check_leaf_grad(&[8], &a, &|g, x| {
            let y = g.relu(x).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn grad_sigmoid_gelu(a in vals(8)) {
        let err = check_leaf_grad(&[8], &a, &|g, x| {
            let y = g.sigmoid(x).unwrap();
            let y = g.gelu(y).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn grad_softmax(a in vals(12)) {
        let err = check_leaf_grad(&[3, 4], &a, &|g, x| {
            let y = g.softmax(x, 1).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn grad_matmul_both_sides(a in vals(6)) {
        // left operand
        let err = check_leaf_grad(&[2, 3], &a, &|g, x| {
            let c = g.constant(TensorData::from_f64_slice(&[3, 4], &probe_weights(12)).unwrap());
            let y = g.matmul(x, c).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-6);
        // right operand
        let err = check_leaf_grad(&[3, 2], &a, &|g, x| {
            let c = g.constant(TensorData::from_f64_slice(&[4, 3], &probe_weights(12)).unwrap());
            let y = g.matmul(c, x).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn grad_layer_norm_all_inputs(a in vals(16)) {
        let err = check_leaf_grad(&[2, 8], &a, &|g, x| {
            let gamma = g.constant(TensorData::from_f64_slice(&[8], &probe_weights(8)).unwrap());
            let beta = g.constant(TensorData::zeros(&[8]));
            let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-5);
        // gamma and beta as the differentiated leaves
        let gb: Vec<f64> = a.iter().take(8).copied().collect();
        let err = check_leaf_grad(&[8], &gb, &|g, gamma| {
            let x = g.constant(TensorData::from_f64_slice(&[2, 8], &probe_weights(16)).unwrap());
            let beta = g.constant(TensorData::from_f64_slice(&[8], &probe_weights(8)).unwrap());
            let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-5);
    }

    #[test]
    fn grad_conv_and_pool(a in vals(2 * 4 * 4)) {
        let err = check_leaf_grad(&[2, 4, 4], &a, &|g, x| {
            let k = g.constant(
                TensorData::from_f64_slice(&[3, 2, 3, 3], &probe_weights(54)).unwrap(),
            );
            let y = g.conv2d(x, k, 1, 1).unwrap();
            let y = g.avg_pool2d(y, 2, 2).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-6);
        // kernel as the differentiated leaf
        let kv: Vec<f64> = a.iter().cycle().take(54).copied().collect();
        let err = check_leaf_grad(&[3, 2, 3, 3], &kv, &|g, k| {
            let x = g.constant(TensorData::from_f64_slice(&[2, 4, 4], &probe_weights(32)).unwrap());
            let y = g.conv2d(x, k, 2, 1).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn grad_channel_ops(a in vals(3 * 4 * 4)) {
        let err = check_leaf_grad(&[3, 4, 4], &a, &|g, x| {
            let s = g.constant(TensorData::from_f64_slice(&[3], &probe_weights(3)).unwrap());
            let y = g.scale_channels(x, s).unwrap();
            let b = g.constant(TensorData::from_f64_slice(&[3], &probe_weights(3)).unwrap());
            let y = g.add_channel_bias(y, b).unwrap();
            let y = g.pad_channels(y, 5).unwrap();
            let y = g.global_avg_pool(y).unwrap();
            weighted_sum(g, y)
        });
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn grad_attention_and_structure_ops(a in vals(6 * 4)) {
        let err = check_leaf_grad(&[6, 4], &a, &|g, x| {
            let y = g.multi_head_attention(x, x, x, 2).unwrap();
            let top = g.slice_rows(y, 0, 4).unwrap();
            let rest = g.slice_rows(y, 4, 6).unwrap();
            let rest = g.transpose(rest).unwrap();
            let mixed = g.matmul(top, rest).unwrap();
            weighted_sum(g, mixed)
        });
        prop_assert!(err < 1e-5);
    }

    #[test]
    fn grad_patches_and_concat(a in vals(3 * 4 * 4)) {
        let err = check_leaf_grad(&[3, 4, 4], &a, &|g, x| {
            let p = g.im2patches(x, 2).unwrap(); // [4, 12]
            let left = g.slice_cols(p, 0, 5).unwrap();
            let right = g.slice_cols(p, 5, 7).unwrap();
            let joined = g.concat_cols(&[right, left]).unwrap();
            let extra = g.constant(TensorData::from_f64_slice(&[2, 12], &probe_weights(24)).unwrap());
            let stacked = g.concat_rows(joined, extra).unwrap();
            let m = g.tokens_to_map(stacked, 2, 3).unwrap();
            weighted_sum(g, m)
        });
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn grad_cross_entropy(a in vals(5)) {
        let err = check_leaf_grad(&[5], &a, &|g, x| g.cross_entropy(x, 3).unwrap());
        prop_assert!(err < 1e-6);
    }
}

// ---------------------------------------------------------------- container

#[test]
fn weight_container_roundtrips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.pswt");
    let mut registry = ParamRegistry::<f32>::new();
    registry.insert(
        "alpha",
        TensorData::from_f64_slice(&[2, 3], &probe_weights(6)).unwrap(),
    );
    registry.insert("beta", TensorData::<f32>::zeros(&[4]));
    registry.insert("gamma.scalar", TensorData::<f32>::scalar(3.25));
    registry.freeze("alpha").unwrap();

    save_weights(&registry, &path).unwrap();
    let loaded = load_weights::<f32>(&path).unwrap();
    for (name, tensor) in registry.iter() {
        let got = loaded.get(name).unwrap();
        assert_eq!(got.shape(), tensor.shape());
        assert_eq!(got.data(), tensor.data(), "{name} not bit-identical");
    }
    assert!(loaded.is_frozen("alpha"));
    assert!(!loaded.is_frozen("beta"));

    // f32 container must not load as f64
    assert!(matches!(
        load_weights::<f64>(&path),
        Err(TensorError::BadContainer(_))
    ));
}

#[test]
fn container_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.pswt");
    std::fs::write(&path, b"not a container").unwrap();
    assert!(matches!(
        load_weights::<f32>(&path),
        Err(TensorError::BadContainer(_))
    ));
}
