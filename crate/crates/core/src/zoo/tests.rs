use super::*;
use crate::nn::{gradient_check, GradCheckConfig};
use crate::pipeline::{fit_scaler, ScalerStats, WindowFeatures};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs(b: usize, seed: u64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, CONTEXT_LEN, N_FEATURES], |_| rng.random::<f64>() * hi)
}

fn scaler() -> ScalerStats {
    let w = |q: f64| WindowFeatures {
        window_index: 0,
        start_ms: 0,
        features: [q / 2.0, q, q / 100.0, q * 3.0, q / 4.0, q],
    };
    fit_scaler(&[w(0.0), w(100.0)]).unwrap()
}

#[test]
fn registry_names_round_trip() {
    assert_eq!(VariantId::ALL.len(), 18);
    for v in VariantId::ALL {
        assert_eq!(v.name().parse::<VariantId>().unwrap(), v);
    }
    assert!(matches!(
        "gru_huge".parse::<VariantId>(),
        Err(ZooError::UnknownVariant(_))
    ));
    let classes: Vec<usize> = [
        ModelClass::Lstm,
        ModelClass::Gru,
        ModelClass::Transformer,
        ModelClass::Dnn,
        ModelClass::Linear,
    ]
    .iter()
    .map(|c| VariantId::ALL.iter().filter(|v| v.class() == *c).count())
    .collect();
    assert_eq!(classes, vec![3, 3, 4, 4, 4]);
}

fn cell_count(v: VariantId) -> usize {
    v.param_specs()
        .iter()
        .filter(|s| s.name.starts_with("l0_"))
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

#[test]
fn recurrent_cell_parameter_counts() {
    // classic gates: g * (in*H + H*H + H)
    let oracle = |g: usize, i: usize, h: usize| g * (i * h + h * h + h);
    assert_eq!(cell_count(VariantId::GruBasic), oracle(3, 6, 32));
    assert_eq!(cell_count(VariantId::GruBasic), 3744);
    assert_eq!(cell_count(VariantId::LstmBasic), 4992);
    assert_eq!(cell_count(VariantId::LstmWide), oracle(4, 6, 100));
    assert_eq!(cell_count(VariantId::GruWide), oracle(3, 6, 64));
    let deep = build_variant(VariantId::GruDeep, 0).unwrap();
    let attn = 32 * 128 + 128 + 128 + 32 + 1;
    assert_eq!(
        deep.param_count(),
        oracle(3, 6, 32) + 2 * oracle(3, 32, 32) + attn
    );
}

#[test]
fn linear_input_dimension() {
    let specs = VariantId::LinBasic.param_specs();
    assert_eq!(specs[0].shape, vec![30, 1]);
}

#[test]
fn transformer_heads_divide_width() {
    for v in VariantId::ALL {
        if let Architecture::Transformer { heads, .. } = v.architecture() {
            assert_eq!(D_MODEL % heads, 0);
        }
    }
}

#[test]
fn zero_parameters_predict_zero() {
    let x = random_inputs(3, 1, 1.0);
    for v in VariantId::ALL {
        let mut m = build_variant(v, 1).unwrap();
        for t in m.params_mut().tensors_mut() {
            t.data_mut().fill(0.0);
        }
        assert!(m.predict(&x).unwrap().iter().all(|&p| p == 0.0), "{v}");
    }
}

#[test]
fn attention_rows_and_shapes() {
    let x = random_inputs(4, 2, 1.0);
    for v in VariantId::ALL {
        let m = build_variant(v, 3).unwrap();
        let (pred, att) = m.predict_with_attention(&x).unwrap();
        assert_eq!(pred.len(), 4);
        match v.architecture() {
            Architecture::Recurrent { .. } => {
                let a = att.unwrap();
                assert_eq!(a.shape(), &[4, 5]);
                for row in a.data().chunks(5) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            Architecture::Transformer { heads, .. } => {
                let a = att.unwrap();
                assert_eq!(a.shape(), &[4, heads, 5, 5]);
                for row in a.data().chunks(5) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            _ => assert!(att.is_none()),
        }
    }
}

#[test]
fn batch_independence_and_determinism() {
    let one = random_inputs(1, 4, 1.0);
    let mut data = one.data().to_vec();
    data.extend(random_inputs(1, 5, 1.0).data());
    data.extend(one.data());
    let x = Tensor::new(vec![3, 5, 6], data).unwrap();
    for v in VariantId::ALL {
        let m = build_variant(v, 7).unwrap();
        let p = m.predict(&x).unwrap();
        assert_eq!(p[0], p[2], "{v}");
        assert_eq!(p, m.predict(&x).unwrap());
        assert_eq!(p[0], m.predict(&one).unwrap()[0], "{v}");
    }
}

#[test]
fn finite_on_wide_inputs() {
    let x = random_inputs(16, 9, 1.5);
    for v in VariantId::ALL {
        let m = build_variant(v, 11).unwrap();
        assert!(m.predict(&x).unwrap().iter().all(|p| p.is_finite()), "{v}");
    }
}

#[test]
fn input_shape_checked() {
    let m = build_variant(VariantId::GruBasic, 0).unwrap();
    let bad = Tensor::zeros(&[2, 4, 6]);
    assert!(matches!(m.predict(&bad), Err(ZooError::ShapeMismatch(_))));
}

#[test]
fn dropout_only_in_training() {
    let m = build_variant(VariantId::DnnHighDrop, 0).unwrap();
    let x = random_inputs(8, 1, 1.0);
    let run = |mode| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, _) = m.forward(&mut tape, xv, mode).unwrap();
        tape.value(out.pred).data().to_vec()
    };
    assert_eq!(run(Mode::Eval), m.predict(&x).unwrap());
    assert_eq!(run(Mode::Train { seed: 3 }), run(Mode::Train { seed: 3 }));
    assert_ne!(run(Mode::Train { seed: 3 }), run(Mode::Eval));
    // single-layer recurrent models have no dropout site
    let g = build_variant(VariantId::GruBasic, 0).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (out, _) = g.forward(&mut tape, xv, Mode::Train { seed: 3 }).unwrap();
    assert_eq!(tape.value(out.pred).data(), &g.predict(&x).unwrap()[..]);
}

#[test]
fn gru_matches_scalar_oracle() {
    // hand-rolled classic GRU on one sample, checked against the tape version
    let m = build_variant(VariantId::GruBasic, 5).unwrap();
    let x = random_inputs(1, 6, 1.0);
    let p = m.params();
    let (k, u, b) = (
        p.get("l0_kernel").unwrap(),
        p.get("l0_recurrent").unwrap(),
        p.get("l0_bias").unwrap(),
    );
    let h_units = 32;
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = vec![0.0; h_units];
    let mut hs = Vec::new();
    for t in 0..5 {
        let xt = &x.data()[t * 6..(t + 1) * 6];
        let pre = |g: usize, j: usize, hv: &[f64]| {
            let col = g * h_units + j;
            let xs: f64 = (0..6).map(|i| xt[i] * k.at2(i, col)).sum();
            let hs: f64 = (0..h_units).map(|i| hv[i] * u.at2(i, col)).sum();
            xs + hs + b.data()[col]
        };
        let z: Vec<f64> = (0..h_units).map(|j| sig(pre(0, j, &h))).collect();
        let r: Vec<f64> = (0..h_units).map(|j| sig(pre(1, j, &h))).collect();
        let rh: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = (0..h_units).map(|j| pre(2, j, &rh).tanh()).collect();
        h = (0..h_units)
            .map(|j| z[j] * h[j] + (1.0 - z[j]) * n[j])
            .collect();
        hs.push(h.clone());
    }
    let (w, bb, v) = (
        p.get("attn_w").unwrap(),
        p.get("attn_b").unwrap(),
        p.get("attn_v").unwrap(),
    );
    let scores: Vec<f64> = hs
        .iter()
        .map(|ht| {
            (0..128)
                .map(|a| {
                    let e: f64 =
                        (0..h_units).map(|i| ht[i] * w.at2(i, a)).sum::<f64>() + bb.data()[a];
                    e.tanh() * v.data()[a]
                })
                .sum()
        })
        .collect();
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    let ctx: Vec<f64> = (0..h_units)
        .map(|i| (0..5).map(|t| ex[t] / z * hs[t][i]).sum())
        .collect();
    let (ow, ob) = (p.get("out_w").unwrap(), p.get("out_b").unwrap());
    let oracle: f64 = ctx.iter().zip(ow.data()).map(|(a, b)| a * b).sum::<f64>() + ob.data()[0];
    let got = m.predict(&x).unwrap()[0];
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

fn check_variant(v: VariantId, seed: u64, mode: Mode) -> f64 {
    let m = build_variant(v, seed).unwrap();
    let mut inputs: Vec<Tensor> = m.params().tensors().cloned().collect();
    // non-zero biases so every path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    for t in inputs.iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let n = inputs.len();
    inputs.push(random_inputs(2, seed, 1.0));
    let arch = v.architecture();
    let coef = Tensor::new(vec![2], vec![0.7, -1.3]).unwrap();
    let report = gradient_check(
        |tape, vars| {
            let out = arch.forward(tape, &vars[..n], vars[n], mode)?;
            let c = tape.constant(coef.clone());
            let y = tape.mul(out.pred, c)?;
            Ok(tape.sum(y))
        },
        &inputs,
        &GradCheckConfig {
            max_coords_per_tensor: Some(3),
            seed,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn gradients_match_finite_differences() {
    for v in [
        VariantId::GruBasic,
        VariantId::LstmDeep,
        VariantId::Tr4Heads,
        VariantId::DnnElu,
        VariantId::LinL2,
    ] {
        let err = check_variant(v, 1, Mode::Eval);
        assert!(err <= 1e-5, "{v}: {err:e}");
    }
}

#[test]
fn gradients_with_fixed_dropout_masks() {
    for v in [VariantId::GruDeep, VariantId::TrBasic, VariantId::DnnBasic] {
        let err = check_variant(v, 2, Mode::Train { seed: 9 });
        assert!(err <= 1e-5, "{v}: {err:e}");
    }
}

#[test]
fn baseline_returns_last_qoe() {
    let mut x = Tensor::zeros(&[16, 5, 6]);
    for b in 0..16 {
        x.data_mut()[b * 30 + 4 * 6 + 5] = b as f64 / 100.0;
        x.data_mut()[b * 30 + 3 * 6 + 5] = 9.0;
    }
    let p = last_value_baseline(&x).unwrap();
    assert_eq!(p.len(), 16);
    assert_eq!(p[0], 0.0);
    assert_eq!(p[15], 0.15);
    let mut one = Tensor::filled(&[1, 5, 6], 0.3);
    one.data_mut()[29] = 0.42;
    assert_eq!(last_value_baseline(&one).unwrap(), vec![0.42]);
}

#[test]
fn bundle_round_trip_is_exact() {
    let m = build_variant(VariantId::GruBasic, 21).unwrap();
    let bundle = ModelBundle::new(&m, scaler(), 10, BundleMeta::default());
    let text = bundle.to_json();
    let back = ModelBundle::from_json(&text).unwrap();
    assert_eq!(back, bundle);
    let x = random_inputs(100, 3, 1.0);
    let a = bundle.model().unwrap().predict(&x).unwrap();
    let b = back.model().unwrap().predict(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(back.to_json(), text);
}

#[test]
fn bundle_guards() {
    let m = build_variant(VariantId::LstmBasic, 2).unwrap();
    let bundle = ModelBundle::new(&m, scaler(), 10, BundleMeta::default());
    let mut doc: serde_json::Value = serde_json::from_str(&bundle.to_json()).unwrap();

    let mut v99 = doc.clone();
    v99["format_version"] = 99.into();
    assert!(matches!(
        ModelBundle::from_json(&v99.to_string()),
        Err(ZooError::VersionMismatch { found: 99, .. })
    ));

    let mut shaped = doc.clone();
    shaped["params"][0]["shape"] = serde_json::json!([3, 128]);
    assert!(matches!(
        ModelBundle::from_json(&shaped.to_string()),
        Err(ZooError::ShapeMismatch(_))
    ));

    doc["params"][1]["values"][0] = 0.5.into();
    assert!(matches!(
        ModelBundle::from_json(&doc.to_string()),
        Err(ZooError::ChecksumMismatch { .. })
    ));
}
