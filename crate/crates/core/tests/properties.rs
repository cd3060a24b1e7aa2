use fqat_core::data::{generate_domains, DomainDataset, GeneratorParams};
use fqat_core::freeze::{gradient_disorder, DisorderTracker, FreezeController, FreezePolicy};
use fqat_core::quantizer::{
    fake_quantize_slice, mse_grid_multiplier, mse_init_scale, quantization_mse, ste_input_grad, QuantKind, QuantSpec,
    ScaleFactor,
};
use fqat_core::record::{EvalRow, FinalRow, RunMeta, RunRecord, ScaleTrace, StepRow};
use fqat_core::sagm::{ascent_step, ScaleCombine};
use fqat_core::tensor::{global_norm, Tensor};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = QuantKind> {
    prop_oneof![Just(QuantKind::Weight), Just(QuantKind::Activation)]
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

proptest! {
    #[test]
    fn quantizer_is_idempotent_and_bounded(
        bits in 2u32..=8,
        kind in kind(),
        log_s in -8.0f64..3.0,
        v in prop::collection::vec(-1e3f64..1e3, 1..50),
    ) {
        let spec = QuantSpec::new(bits, kind).unwrap();
        let s = log_s.exp();
        let q = fake_quantize_slice(&v, s, &spec);
        let qq = fake_quantize_slice(&q, s, &spec);
        for (a, b) in q.iter().zip(&qq) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!(*a >= s * spec.lower() as f64 && *a <= s * spec.upper() as f64);
            let k = (a / s).round();
            prop_assert_eq!((s * k).to_bits(), a.to_bits());
        }
    }

    #[test]
    fn quantizer_is_monotone(
        bits in 2u32..=8,
        kind in kind(),
        s in 1e-3f64..10.0,
        a in -100.0f64..100.0,
        d in 0.0f64..50.0,
    ) {
        let spec = QuantSpec::new(bits, kind).unwrap();
        let q = fake_quantize_slice(&[a, a + d], s, &spec);
        prop_assert!(q[0] <= q[1]);
    }

    #[test]
    fn ste_zero_outside_clip_range(
        bits in 2u32..=6,
        kind in kind(),
        s in 1e-2f64..2.0,
        v in prop::collection::vec(-50.0f64..50.0, 1..30),
    ) {
        let spec = QuantSpec::new(bits, kind).unwrap();
        let scale = ScaleFactor::new("s", spec, s).unwrap();
        let t = Tensor::new(vec![v.len()], v.clone()).unwrap();
        let up = Tensor::new(vec![v.len()], vec![1.0; v.len()]).unwrap();
        let g = ste_input_grad(&up, &t, &scale).unwrap();
        for (x, gx) in v.iter().zip(g.data()) {
            let r = x / s;
            let inside = r >= spec.lower() as f64 && r <= spec.upper() as f64;
            prop_assert_eq!(*gx, if inside { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn mse_init_beats_every_grid_point(
        bits in 2u32..=5,
        kind in kind(),
        v in prop::collection::vec(-5.0f64..5.0, 1..60),
    ) {
        prop_assume!(v.iter().any(|x| *x != 0.0));
        let spec = QuantSpec::new(bits, kind).unwrap();
        let init = mse_init_scale(&v, spec, "s").unwrap();
        let max_abs = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..100 {
            let s = mse_grid_multiplier(i) * max_abs / spec.upper() as f64;
            prop_assert!(init.mse <= quantization_mse(&v, s, &spec));
        }
        prop_assert_eq!(init.mse, quantization_mse(&v, init.scale.value(), &spec));
    }

    #[test]
    fn disorder_bounds_and_invariances(
        seq in prop::collection::vec(prop_oneof![Just(0.0f64), -10.0f64..10.0], 2..40),
        c in 1e-6f64..1e6,
    ) {
        let d = gradient_disorder(&seq).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let scaled: Vec<f64> = seq.iter().map(|v| c * v).collect();
        prop_assert_eq!(d, gradient_disorder(&scaled).unwrap());
        let negated: Vec<f64> = seq.iter().map(|v| -v).collect();
        prop_assert_eq!(d, gradient_disorder(&negated).unwrap());
        let reversed: Vec<f64> = seq.iter().rev().copied().collect();
        prop_assert_eq!(d, gradient_disorder(&reversed).unwrap());
        let all_same_sign = seq.windows(2).all(|w| sign(w[0]) == sign(w[1]));
        prop_assert_eq!(d == 0.0, all_same_sign);
    }

    #[test]
    fn tracker_matches_trailing_window(
        k in 2usize..10,
        seq in prop::collection::vec(-3.0f64..3.0, 1..60),
    ) {
        let mut t = DisorderTracker::new("s", k).unwrap();
        for (i, &v) in seq.iter().enumerate() {
            t.record_step(v).unwrap();
            let expected = (i + 1 >= k).then(|| gradient_disorder(&seq[i + 1 - k..=i]).unwrap());
            prop_assert_eq!(t.current_disorder(), expected);
        }
    }

    #[test]
    fn threshold_extremes(
        k in 2u64..10,
        seq in prop::collection::vec(-3.0f64..3.0, 10..40),
    ) {
        let window = &seq[..k as usize];
        let fully_alternating = window.windows(2).all(|w| sign(w[0]) != sign(w[1]));
        for (r, expect) in [(0.0, false), (1.0, !fully_alternating)] {
            let mut c = FreezeController::new(vec!["s".into()], FreezePolicy::Adaptive, r, k, ScaleCombine::Sum).unwrap();
            let spec = QuantSpec::new(4, QuantKind::Weight).unwrap();
            let mut s = vec![ScaleFactor::new("s", spec, 1.0).unwrap()];
            for &v in window {
                c.step(&mut s, &[v], Some(&[0.1]), 1e-3).unwrap();
            }
            prop_assert_eq!(c.state.frozen()[0], expect);
        }
    }

    #[test]
    fn ascent_step_has_radius(
        g in prop::collection::vec(-10.0f64..10.0, 1..40),
        rho in 1e-4f64..1.0,
    ) {
        prop_assume!(g.iter().any(|x| x.abs() > 1e-6));
        let t = vec![Tensor::new(vec![g.len()], g).unwrap()];
        let (eps, zero) = ascent_step(&t, rho);
        prop_assert!(!zero);
        prop_assert!((global_norm(&eps) - rho).abs() < 1e-12);
    }

    #[test]
    fn record_jsonl_round_trip(
        losses in prop::collection::vec(-1e3f64..1e3, 1..10),
        acc in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut r = RunRecord::new(RunMeta {
            method: "FQAT".into(),
            test_domain: 2,
            seed,
            bits: Some(3),
            cell_key: None,
        });
        for (i, &l) in losses.iter().enumerate() {
            r.steps.push(StepRow {
                step: i as u64 + 1,
                loss_va: l,
                loss_flat: Some(l * 0.5),
                batch_checksum: seed ^ i as u64,
                zero_gradient: false,
                surrogate_gap: None,
                refreshed: i % 2 == 0,
                scales: vec![ScaleTrace {
                    id: "fc0.a".into(),
                    g_va: l / 3.0,
                    g_flat: Some(-l),
                    delta: None,
                    frozen: i % 3 == 0,
                    value: acc + 1e-3,
                }],
            });
        }
        r.evals.push(EvalRow { step: 1, val_acc: acc, test_acc: acc / 3.0 });
        r.final_row = Some(FinalRow {
            best_val_step: 1,
            val_acc: acc,
            test_acc: acc / 3.0,
            batches_checked: 3,
            samples_checked: 9,
        });
        let text = r.to_jsonl().unwrap();
        let back = RunRecord::from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(back.to_jsonl().unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_text_round_trip(seed in any::<u64>(), n_domains in 3usize..5, dim in 2usize..5) {
        let ds = generate_domains(seed, n_domains, 12, 3, dim, &GeneratorParams::default()).unwrap();
        let back = DomainDataset::from_text(&ds.to_text()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
