//! Quantization properties: fixed-point requantization equivalence,
//! saturation under fuzzing, round-trip error bounds, batch-norm folding
//! equivalence, and small-model i8/f16 parity.

mod common;

use common::random_tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qnet::builders::init_weights;
use qnet::graph::{Graph, GraphMetadata, LayerKind, LayerSpec};
use qnet::quant::{
    calibrate, dequantize, fold_batchnorm, quantize_f16, quantize_i8, quantize_weights_per_channel,
    ActQuant, QuantScale, Requant,
};
use qnet::tensor::{ActivationKind, Padding, PoolKind, Tensor};
use qnet::{forward, ExecMode};

fn meta(classes: usize, res: usize) -> GraphMetadata {
    GraphMetadata {
        architecture: "toy".into(),
        num_classes: classes,
        alpha: 1.0,
        resolution: res,
        head: String::new(),
    }
}

#[test]
fn requant_fixed_point_matches_float_reference_on_1e6_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1);
    for i in 0..1_000_000usize {
        let acc: i32 = rng.random_range(-(1 << 26)..(1 << 26));
        let m: f64 = rng.random_range(1e-8f64..2.0);
        let r = Requant::from_multiplier(m);
        // float-scaled reference sharing the decomposed multiplier
        let float_ref = (acc as f64 * r.effective()).round() as i64;
        let fixed = r.apply(acc) as i64;
        assert_eq!(fixed, float_ref, "pair {i}: acc={acc} m={m}");
    }
}

#[test]
fn quantization_saturates_under_fuzzing() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF2);
    for _ in 0..1_000_000usize {
        let lo: f32 = rng.random_range(-100.0..50.0);
        let hi: f32 = lo + rng.random_range(0.0..150.0);
        let aq = ActQuant::from_range(lo, hi);
        let x: f32 = rng.random_range(-1e6..1e6);
        let q = aq.quantize(x);
        // i8 by construction, but the interesting part is clamping: values
        // beyond the range map to the boundary codes instead of wrapping
        if x > hi.max(0.0) + aq.scale {
            assert_eq!(q, 127, "x={x} range=({lo},{hi})");
        }
        if x < lo.min(0.0) - aq.scale {
            assert_eq!(q, -128, "x={x} range=({lo},{hi})");
        }
    }
}

#[test]
fn roundtrip_error_within_half_scale_for_in_range_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF3);
    for _ in 0..100_000usize {
        let lo: f32 = rng.random_range(-10.0..5.0);
        let hi: f32 = lo + rng.random_range(0.1..20.0);
        let aq = ActQuant::from_range(lo, hi);
        let x: f32 = rng.random_range(lo.min(0.0)..hi.max(0.0));
        let err = (aq.dequantize(aq.quantize(x)) - x).abs();
        assert!(
            err <= aq.scale / 2.0 + aq.scale * 1e-4,
            "x={x} err={err} scale={}",
            aq.scale
        );
    }
}

#[test]
fn weight_roundtrip_error_within_half_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF4);
    let w = random_tensor(vec![3, 3, 4, 8], &mut rng);
    let q = quantize_weights_per_channel(&w, 3);
    let back = dequantize(&q);
    let QuantScale::PerChannel { scales, .. } = &q.scale else {
        panic!("expected per-channel scales");
    };
    for (i, (&orig, &rec)) in w.data().iter().zip(back.data()).enumerate() {
        let c = i % 8;
        assert!(
            (orig - rec).abs() <= scales[c] / 2.0 + scales[c] * 1e-4,
            "elem {i}: {orig} vs {rec}"
        );
    }
}

/// Random conv/depthwise + batch-norm stacks of depth <= 6: folded output
/// must match unfolded within 1e-5 relative.
#[test]
fn fold_batchnorm_preserves_outputs_on_50_random_stacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF5);
    for case in 0..50 {
        let depth = rng.random_range(1..=6);
        let mut layers = vec![LayerSpec {
            name: "input".into(),
            kind: LayerKind::Input {
                height: 8,
                width: 8,
                channels: 3,
            },
            inputs: vec![],
        }];
        let mut prev = "input".to_string();
        let mut channels = 3usize;
        for d in 0..depth {
            let name = format!("conv{d}");
            if rng.random_bool(0.3) {
                layers.push(LayerSpec {
                    name: name.clone(),
                    kind: LayerKind::Depthwise {
                        kernel: (3, 3),
                        stride: (1, 1),
                        padding: Padding::Same,
                        bias: rng.random_bool(0.5),
                    },
                    inputs: vec![prev.clone()],
                });
            } else {
                let out = rng.random_range(2..=6);
                layers.push(LayerSpec {
                    name: name.clone(),
                    kind: LayerKind::Conv2d {
                        out_channels: out,
                        kernel: (3, 3),
                        stride: (1, 1),
                        padding: Padding::Same,
                        bias: rng.random_bool(0.5),
                    },
                    inputs: vec![prev.clone()],
                });
                channels = out;
            }
            layers.push(LayerSpec {
                name: format!("bn{d}"),
                kind: LayerKind::BatchNorm { epsilon: 1e-3 },
                inputs: vec![name.clone()],
            });
            layers.push(LayerSpec {
                name: format!("relu{d}"),
                kind: LayerKind::Activation {
                    activation: ActivationKind::Relu,
                },
                inputs: vec![format!("bn{d}")],
            });
            prev = format!("relu{d}");
        }
        let graph = Graph::new(layers, meta(2, 8)).unwrap();
        let mut weights = init_weights(&graph, case as u64).unwrap();
        // randomize batch-norm statistics so folding is non-trivial
        for d in 0..depth {
            let bn = format!("bn{d}");
            let c = weights.get(&bn, "gamma").unwrap().len();
            for p in ["gamma", "beta", "mean", "variance"] {
                let data: Vec<f32> = (0..c)
                    .map(|_| match p {
                        "variance" => rng.random_range(0.2..2.0),
                        "gamma" => rng.random_range(0.5..1.5),
                        _ => rng.random_range(-0.5..0.5),
                    })
                    .collect();
                weights.insert(&bn, p, Tensor::new(vec![c], data).unwrap());
            }
        }
        let _ = channels;

        let input = random_tensor(vec![1, 8, 8, 3], &mut rng);
        let before = forward(&graph, &weights, &input, ExecMode::Infer).unwrap();
        let (folded, fweights) = fold_batchnorm(&graph, &weights).unwrap();
        assert!(folded
            .layers()
            .iter()
            .all(|l| !matches!(l.kind, LayerKind::BatchNorm { .. })));
        let after = forward(&folded, &fweights, &input, ExecMode::Infer).unwrap();
        let rel = common::max_rel_error(&before, &after);
        assert!(rel <= 1e-5, "case {case}: rel {rel}");
    }
}

/// conv -> relu -> gap -> dense -> softmax net used by the parity checks.
fn small_model(seed: u64) -> (Graph, qnet::WeightStore) {
    let layers = vec![
        LayerSpec {
            name: "input".into(),
            kind: LayerKind::Input {
                height: 12,
                width: 12,
                channels: 3,
            },
            inputs: vec![],
        },
        LayerSpec {
            name: "conv".into(),
            kind: LayerKind::Conv2d {
                out_channels: 8,
                kernel: (3, 3),
                stride: (2, 2),
                padding: Padding::Same,
                bias: true,
            },
            inputs: vec!["input".into()],
        },
        LayerSpec {
            name: "relu".into(),
            kind: LayerKind::Activation {
                activation: ActivationKind::Relu,
            },
            inputs: vec!["conv".into()],
        },
        LayerSpec {
            name: "gap".into(),
            kind: LayerKind::Pool {
                pool: PoolKind::GlobalAvg,
                window: (0, 0),
                stride: (1, 1),
            },
            inputs: vec!["relu".into()],
        },
        LayerSpec {
            name: "fc".into(),
            kind: LayerKind::Dense {
                out_features: 3,
                bias: true,
                zero_init: false,
            },
            inputs: vec!["gap".into()],
        },
        LayerSpec {
            name: "softmax".into(),
            kind: LayerKind::Activation {
                activation: ActivationKind::Softmax,
            },
            inputs: vec!["fc".into()],
        },
    ];
    let graph = Graph::new(layers, meta(3, 12)).unwrap();
    let weights = init_weights(&graph, seed).unwrap();
    (graph, weights)
}

#[test]
fn i8_forward_stays_close_to_f32_on_small_model() {
    let (graph, weights) = small_model(0xAB);
    let mut rng = ChaCha8Rng::seed_from_u64(0xF6);
    let calib: Vec<Tensor> = (0..20)
        .map(|_| random_tensor(vec![1, 12, 12, 3], &mut rng))
        .collect();
    let profile = calibrate(&graph, &weights, &calib).unwrap();
    let qmodel = quantize_i8(&graph, &weights, &profile).unwrap();

    let mut total_abs_diff = 0.0f64;
    let mut count = 0usize;
    for _ in 0..100 {
        let input = random_tensor(vec![1, 12, 12, 3], &mut rng);
        let f = forward(&graph, &weights, &input, ExecMode::Infer).unwrap();
        let q = qmodel.forward(&input).unwrap();
        for (&a, &b) in f.data().iter().zip(q.data()) {
            total_abs_diff += (a - b).abs() as f64;
            count += 1;
        }
    }
    let mean = total_abs_diff / count as f64;
    assert!(mean <= 0.02, "mean absolute probability difference {mean}");
}

#[test]
fn f16_and_f32_agree_on_argmax_for_1000_inputs() {
    let (graph, weights) = small_model(0xCD);
    let blob = quantize_f16(&weights).unwrap();
    let widened = blob.widen();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF7);
    let mut agree = 0usize;
    let n = 1000;
    for _ in 0..n {
        let input = random_tensor(vec![1, 12, 12, 3], &mut rng);
        let a = forward(&graph, &weights, &input, ExecMode::Infer).unwrap();
        let b = forward(&graph, &widened, &input, ExecMode::Infer).unwrap();
        let am = qnet::eval::argmax_lowest(a.data());
        let bm = qnet::eval::argmax_lowest(b.data());
        agree += (am == bm) as usize;
    }
    assert!(
        agree as f64 / n as f64 >= 0.99,
        "argmax agreement {agree}/{n}"
    );
}

#[test]
fn calibration_ranges_contain_zero_image_and_union_monotonically() {
    let (graph, weights) = small_model(0xEE);
    let zero = Tensor::zeros(vec![1, 12, 12, 3]);
    let p0 = calibrate(&graph, &weights, std::slice::from_ref(&zero)).unwrap();
    for (layer, r) in &p0.ranges {
        if layer == "softmax" {
            // softmax of an all-zero pre-activation is uniform, not zero;
            // it runs in f32 and never feeds a quantized kernel
            continue;
        }
        assert!(r.min <= 0.0 + 1e-6 && r.max >= 0.0 - 1e-6, "{layer}: {r:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xF8);
    let a = random_tensor(vec![1, 12, 12, 3], &mut rng);
    let b = random_tensor(vec![1, 12, 12, 3], &mut rng);
    let pa = calibrate(&graph, &weights, std::slice::from_ref(&a)).unwrap();
    let pb = calibrate(&graph, &weights, std::slice::from_ref(&b)).unwrap();
    let pab = calibrate(&graph, &weights, &[a.clone(), b.clone()]).unwrap();
    for (layer, r) in &pab.ranges {
        assert_eq!(
            r.min,
            pa.ranges[layer].min.min(pb.ranges[layer].min),
            "{layer}"
        );
        assert_eq!(
            r.max,
            pa.ranges[layer].max.max(pb.ranges[layer].max),
            "{layer}"
        );
    }

    // adding an image never shrinks a range
    let mut set = vec![a, b];
    let mut prev = pab;
    for i in 0..4 {
        set.push(random_tensor(vec![1, 12, 12, 3], &mut rng));
        let next = calibrate(&graph, &weights, &set).unwrap();
        for (layer, r) in &next.ranges {
            assert!(r.min <= prev.ranges[layer].min, "{layer} at step {i}");
            assert!(r.max >= prev.ranges[layer].max, "{layer} at step {i}");
        }
        prev = next;
    }
}

#[test]
fn calibrate_rejects_empty_set() {
    let (graph, weights) = small_model(1);
    assert!(calibrate(&graph, &weights, &[]).is_err());
}

#[test]
fn quantize_i8_rejects_non_finite_weights() {
    let (graph, mut weights) = small_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let calib: Vec<Tensor> = (0..2)
        .map(|_| random_tensor(vec![1, 12, 12, 3], &mut rng))
        .collect();
    let profile = calibrate(&graph, &weights, &calib).unwrap();
    weights.get_mut("conv", "kernel").unwrap().data_mut()[0] = f32::INFINITY;
    assert!(matches!(
        quantize_i8(&graph, &weights, &profile),
        Err(qnet::quant::QuantError::NonFinite { .. })
    ));
}

#[test]
fn quantize_i8_requires_profile_coverage_and_folding() {
    let (graph, weights) = small_model(7);
    let profile = qnet::quant::CalibrationProfile {
        ranges: Default::default(),
        samples: 1,
    };
    let err = quantize_i8(&graph, &weights, &profile).unwrap_err();
    assert!(err.to_string().contains("does not cover"), "{err}");
}

#[test]
fn i8_container_roundtrip_preserves_model_and_bytes() {
    let (graph, weights) = small_model(0x77);
    let mut rng = ChaCha8Rng::seed_from_u64(0xF9);
    let calib: Vec<Tensor> = (0..4)
        .map(|_| random_tensor(vec![1, 12, 12, 3], &mut rng))
        .collect();
    let profile = calibrate(&graph, &weights, &calib).unwrap();
    let qmodel = quantize_i8(&graph, &weights, &profile).unwrap();

    let bytes = qnet::format::encode_model(&qnet::Model::I8(qmodel.clone())).unwrap();
    let loaded = qnet::format::decode_model(&bytes).unwrap();
    let again = qnet::format::encode_model(&loaded).unwrap();
    assert_eq!(bytes, again, "canonical i8 serialization");

    let qnet::Model::I8(loaded_model) = loaded else {
        panic!("expected i8 model");
    };
    let input = random_tensor(vec![1, 12, 12, 3], &mut rng);
    assert_eq!(
        qmodel.forward(&input).unwrap(),
        loaded_model.forward(&input).unwrap()
    );
}

#[test]
fn size_report_ratios_on_a_real_architecture() {
    use qnet::quant::size_report;
    let dir = tempfile::tempdir().unwrap();
    let graph = qnet::builders::build_mobilenet_v1(1.0, 96, 3).unwrap();
    let weights = init_weights(&graph, 3).unwrap();

    let f32_path = dir.path().join("m_f32.qnet");
    qnet::save_model(
        &f32_path,
        &qnet::Model::F32 {
            graph: graph.clone(),
            weights: weights.clone(),
        },
    )
    .unwrap();

    let f16_path = dir.path().join("m_f16.qnet");
    let blob = quantize_f16(&weights).unwrap();
    qnet::save_model(
        &f16_path,
        &qnet::Model::F16 {
            graph: graph.clone(),
            weights: blob,
        },
    )
    .unwrap();

    let (folded, fweights) = fold_batchnorm(&graph, &weights).unwrap();
    let calib: Vec<Tensor> = (0..2)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            random_tensor(vec![1, 96, 96, 3], &mut rng)
        })
        .collect();
    let profile = calibrate(&folded, &fweights, &calib).unwrap();
    let qmodel = quantize_i8(&folded, &fweights, &profile).unwrap();
    let i8_path = dir.path().join("m_i8.qnet");
    qnet::save_model(&i8_path, &qnet::Model::I8(qmodel)).unwrap();

    let report = size_report(&[f32_path, f16_path, i8_path]).unwrap();
    assert_eq!(report.rows[0].ratio_vs_f32, 1.0);
    assert!(
        report.rows[1].ratio_vs_f32 <= 0.55,
        "f16 {}",
        report.rows[1].ratio_vs_f32
    );
    assert!(
        report.rows[2].ratio_vs_f32 <= 0.30,
        "i8 {}",
        report.rows[2].ratio_vs_f32
    );
}

#[test]
fn size_report_rejects_mismatched_architectures() {
    use qnet::quant::size_report;
    let dir = tempfile::tempdir().unwrap();
    let g1 = qnet::builders::build_mobilenet_v1(0.25, 96, 3).unwrap();
    let g2 = qnet::builders::build_mobilenet_v2(0.25, 96, 3).unwrap();
    let p1 = dir.path().join("a.qnet");
    let p2 = dir.path().join("b.qnet");
    qnet::save_model(
        &p1,
        &qnet::Model::F32 {
            weights: init_weights(&g1, 0).unwrap(),
            graph: g1,
        },
    )
    .unwrap();
    qnet::save_model(
        &p2,
        &qnet::Model::F32 {
            weights: init_weights(&g2, 0).unwrap(),
            graph: g2,
        },
    )
    .unwrap();
    assert!(size_report(&[p1, p2]).is_err());
}
