//! Detection-module checks: aggregator and SE layer against straight-line
//! oracles, the delta branch, and training-loop contracts.

use promptsam::promptmodule::{fit, ModelConfig, PromptSamModel, TrainConfig, TrainError};
use promptsam::promptvit::EncoderConfig;
use promptsam::tensorcore::{Graph, ParamRegistry, TensorData};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            img_size: 16,
            patch_size: 4,
            depth: 2,
            dim: 8,
            heads: 2,
            prompt_count: 2,
            deep_prompts: false,
        },
        se_reduction: 4,
        n_classes: 2,
    }
}

fn lcg_vals(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 40) as f64 / (1u64 << 23) as f64 - 1.0
        })
        .collect()
}

// --------------------------------------------------------------- aggregator

/// Straight-line scalar re-implementation of the per-tap transform and the
/// running sum: `psi_i = psi_{i-1} + avgpool2(f_i) + avgpool2(conv3x3(f_i))`.
fn aggregate_oracle(taps: &[Vec<f64>], kernels: &[Vec<f64>], c: usize, s: usize) -> Vec<f64> {
    let half = s / 2;
    let mut psi = vec![0.0; c * half * half];
    for (tap, kernel) in taps.iter().zip(kernels) {
        // conv3x3, stride 1, pad 1, bias-free
        let mut conv = vec![0.0; c * s * s];
        for o in 0..c {
            for oy in 0..s {
                for ox in 0..s {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= s as isize || ix >= s as isize {
                                    continue;
                                }
                                acc += tap[(ci * s + iy as usize) * s + ix as usize]
                                    * kernel[((o * c + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    conv[(o * s + oy) * s + ox] = acc;
                }
            }
        }
        // 2x average pooling of both the tap and its convolution
        let pool = |src: &[f64], ch: usize, y: usize, x: usize| -> f64 {
            let mut acc = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    acc += src[(ch * s + 2 * y + dy) * s + 2 * x + dx];
                }
            }
            acc / 4.0
        };
        for ch in 0..c {
            for y in 0..half {
                for x in 0..half {
                    psi[(ch * half + y) * half + x] +=
                        pool(tap, ch, y, x) + pool(&conv, ch, y, x);
                }
            }
        }
    }
    psi
}

#[test]
fn aggregate_matches_straight_line_oracle() {
    let cfg = small_cfg();
    let model = PromptSamModel::new(cfg).unwrap();
    let mut registry = ParamRegistry::<f64>::new();
    model.init(&mut registry, 31).unwrap();

    let (c, s) = (8, 4); // dim x grid x grid taps
    let tap_vals: Vec<Vec<f64>> = (0..2).map(|i| lcg_vals(100 + i, c * s * s)).collect();
    let kernels: Vec<Vec<f64>> = (0..2)
        .map(|i| {
            registry
                .get(&format!("agg.conv{i}.w"))
                .unwrap()
                .data()
                .to_vec()
        })
        .collect();

    let mut g = Graph::new();
    let taps: Vec<_> = tap_vals
        .iter()
        .map(|v| g.constant(TensorData::from_f64_slice(&[c, s, s], v).unwrap()))
        .collect();
    let psi = model.aggregate(&mut g, &registry, &taps).unwrap();
    assert_eq!(g.shape(psi), &[c, s / 2, s / 2]);

    let expect = aggregate_oracle(&tap_vals, &kernels, c, s);
    for (&a, &b) in g.value(psi).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn aggregate_with_near_identity_kernel_doubles_the_pool() {
    // conv kernel = per-channel identity (center tap 1): conv(f) = f, so the
    // per-tap transform collapses to 2 * avgpool(f)
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            depth: 1,
            ..small_cfg().encoder
        },
        ..small_cfg()
    };
    let model = PromptSamModel::new(cfg).unwrap();
    let mut registry = ParamRegistry::<f64>::new();
    model.init(&mut registry, 8).unwrap();
    let dim = 8;
    let mut ident = TensorData::<f64>::zeros(&[dim, dim, 3, 3]);
    for o in 0..dim {
        ident.data_mut()[((o * dim + o) * 3 + 1) * 3 + 1] = 1.0;
    }
    registry.insert("agg.conv0.w", ident);

    let vals = lcg_vals(77, dim * 16);
    let mut g = Graph::new();
    let tap = g.constant(TensorData::from_f64_slice(&[dim, 4, 4], &vals).unwrap());
    let psi = model.aggregate(&mut g, &registry, &[tap]).unwrap();
    let pooled = g.avg_pool2d(tap, 2, 2).unwrap();
    let doubled = g.scale(pooled, 2.0).unwrap();
    assert!(g.value(psi).max_abs_diff(g.value(doubled)) < 1e-12);
}

#[test]
fn aggregate_of_zero_taps_is_zero() {
    let model = PromptSamModel::new(small_cfg()).unwrap();
    let mut registry = ParamRegistry::<f64>::new();
    model.init(&mut registry, 2).unwrap();
    let mut g = Graph::new();
    let zero = g.constant(TensorData::zeros(&[8, 4, 4]));
    let psi = model.aggregate(&mut g, &registry, &[zero, zero]).unwrap();
    assert!(g.value(psi).data().iter().all(|&v| v == 0.0));
}

// ----------------------------------------------------------------- SE layer

#[test]
fn se_with_zero_weights_halves_the_input() {
    let model = PromptSamModel::new(small_cfg()).unwrap();
    let mut registry = ParamRegistry::<f64>::new();
    model.init(&mut registry, 4).unwrap();
    registry.insert("se.w1", TensorData::zeros(&[8, 2]));
    registry.insert("se.w2", TensorData::zeros(&[2, 8]));

    let vals = lcg_vals(5, 8 * 16);
    let mut g = Graph::new();
    let x = g.constant(TensorData::from_f64_slice(&[8, 4, 4], &vals).unwrap());
    let y = model.se_layer(&mut g, &registry, x).unwrap();
    for (&a, &b) in g.value(y).data().iter().zip(&vals) {
        assert!((a - b / 2.0).abs() < 1e-12);
    }

    // zero input stays zero regardless of weights
    let mut registry2 = ParamRegistry::<f64>::new();
    model.init(&mut registry2, 6).unwrap();
    let z = g.constant(TensorData::zeros(&[8, 4, 4]));
    let y = model.se_layer(&mut g, &registry2, z).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn se_matches_formula_oracle() {
    let model = PromptSamModel::new(small_cfg()).unwrap();
    let mut registry = ParamRegistry::<f64>::new();
    model.init(&mut registry, 12).unwrap();
    let (dim, r, hw) = (8usize, 2usize, 16usize);
    let vals = lcg_vals(21, dim * hw);
    let w1 = registry.get("se.w1").unwrap().data().to_vec();
    let w2 = registry.get("se.w2").unwrap().data().to_vec();

    // straight-line: gap -> w1 -> relu -> w2 -> sigmoid -> channel scale
    let gap: Vec<f64> = (0..dim)
        .map(|c| vals[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let hidden: Vec<f64> = (0..r)
        .map(|j| (0..dim).map(|i| gap[i] * w1[i * r + j]).sum::<f64>().max(0.0))
        .collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let z: f64 = (0..r).map(|i| hidden[i] * w2[i * dim + j]).sum();
            1.0 / (1.0 + (-z).exp())
        })
        .collect();

    let mut g = Graph::new();
    let x = g.constant(TensorData::from_f64_slice(&[dim, 4, 4], &vals).unwrap());
    let y = model.se_layer(&mut g, &registry, x).unwrap();
    for c in 0..dim {
        for k in 0..hw {
            let expect = vals[c * hw + k] * scale[c];
            let got = g.value(y).data()[c * hw + k];
            assert!((got - expect).abs() < 1e-12);
        }
    }
}

// -------------------------------------------------------------- delta branch

#[test]
fn downsample_pad_shapes_and_box_average() {
    let model = PromptSamModel::new(small_cfg()).unwrap();
    let mut g = Graph::<f64>::new();
    // constant image: averaged pixels keep the constant, padded channels zero
    let img = g.constant(TensorData::filled(&[3, 16, 16], 0.25));
    let delta = model.downsample_pad(&mut g, img).unwrap();
    assert_eq!(g.shape(delta), &[8, 2, 2]);
    let data = g.value(delta).data();
    assert!(data[..3 * 4].iter().all(|&v| (v - 0.25).abs() < 1e-12));
    assert!(data[3 * 4..].iter().all(|&v| v == 0.0));

    // 2x2 -> 1x1 box average oracle on the aggregator-size image
    let vals = lcg_vals(3, 3 * 4 * 4);
    let img = g.constant(TensorData::from_f64_slice(&[3, 4, 4], &vals).unwrap());
    let delta = model.downsample_pad(&mut g, img).unwrap();
    assert_eq!(g.shape(delta), &[8, 2, 2]);
    let data = g.value(delta).data();
    for c in 0..3 {
        for y in 0..2 {
            for x in 0..2 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += vals[(c * 4 + 2 * y + dy) * 4 + 2 * x + dx];
                    }
                }
                assert!((data[(c * 2 + y) * 2 + x] - acc / 4.0).abs() < 1e-12);
            }
        }
    }
}

// ------------------------------------------------------------- training loop

fn toy_dataset(n_per_class: usize) -> Vec<(TensorData<f32>, usize)> {
    let mut data = Vec::new();
    for k in 0..n_per_class {
        for label in 0..2usize {
            let vals: Vec<f64> = lcg_vals((k * 2 + label) as u64, 3 * 16 * 16)
                .iter()
                .map(|v| (v * 0.2 + label as f64 * 0.6).clamp(0.0, 1.0))
                .collect();
            data.push((
                TensorData::from_f64_slice(&[3, 16, 16], &vals).unwrap(),
                label,
            ));
        }
    }
    data
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let model = PromptSamModel::new(small_cfg()).unwrap();
    let mut registry = ParamRegistry::<f32>::new();
    model.init(&mut registry, 9).unwrap();
    let before: Vec<(String, TensorData<f32>)> = registry
        .iter()
        .map(|(n, t)| (n.to_owned(), t.clone()))
        .collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 0.0,
        ..Default::default()
    };
    fit(&model, &toy_dataset(2), &cfg, &mut registry).unwrap();
    for (name, tensor) in before {
        assert_eq!(registry.get(&name).unwrap(), &tensor, "{name} moved");
    }
}

#[test]
fn training_is_seed_deterministic_and_respects_freezing() {
    let model = PromptSamModel::new(small_cfg()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        learning_rate: 0.05,
        momentum: 0.9,
        seed: 123,
        stop_at_train_acc: None,
    };
    let dataset = toy_dataset(3);

    let run = || {
        let mut registry = ParamRegistry::<f32>::new();
        model.init(&mut registry, 77).unwrap();
        let report = fit(&model, &dataset, &cfg, &mut registry).unwrap();
        (registry, report)
    };
    let (reg_a, rep_a) = run();
    let (reg_b, rep_b) = run();
    assert_eq!(rep_a.epoch_loss, rep_b.epoch_loss);
    for (name, tensor) in reg_a.iter() {
        assert_eq!(reg_b.get(name).unwrap(), tensor, "{name} differs");
    }

    // frozen base untouched, trainables moved
    let mut init_reg = ParamRegistry::<f32>::new();
    model.init(&mut init_reg, 77).unwrap();
    for name in model.enc.base_param_names() {
        assert_eq!(reg_a.get(&name).unwrap(), init_reg.get(&name).unwrap());
    }
    let mut moved = 0;
    for name in reg_a.trainable_names() {
        if reg_a.get(name).unwrap() != init_reg.get(name).unwrap() {
            moved += 1;
        }
    }
    assert!(moved > 0, "no trainable parameter moved");
}

#[test]
fn single_class_dataset_is_rejected() {
    let model = PromptSamModel::new(small_cfg()).unwrap();
    let mut registry = ParamRegistry::<f32>::new();
    model.init(&mut registry, 1).unwrap();
    let dataset: Vec<_> = toy_dataset(2)
        .into_iter()
        .filter(|(_, l)| *l == 0)
        .collect();
    assert!(matches!(
        fit(&model, &dataset, &TrainConfig::default(), &mut registry),
        Err(TrainError::SingleClassDataset)
    ));
}

#[test]
fn early_stop_caps_epochs() {
    let model = PromptSamModel::new(small_cfg()).unwrap();
    let mut registry = ParamRegistry::<f32>::new();
    model.init(&mut registry, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 4,
        stop_at_train_acc: Some(0.0), // satisfied immediately
        ..Default::default()
    };
    let report = fit(&model, &toy_dataset(2), &cfg, &mut registry).unwrap();
    assert_eq!(report.epoch_acc.len(), 1);
}

#[test]
fn config_validation_rejects_bad_combinations() {
    for bad in [
        ModelConfig {
            se_reduction: 3,
            ..small_cfg()
        },
        ModelConfig {
            n_classes: 1,
            ..small_cfg()
        },
    ] {
        assert!(PromptSamModel::new(bad).is_err(), "{bad:?}");
    }
}
