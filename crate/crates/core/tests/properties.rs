use proptest::prelude::*;

use dpr::autodiff::Tape;
use dpr::backbone::{patchify, DprNetModel, ModelConfig};
use dpr::data::{make_regime_synthetic, RegimeSpec};
use dpr::diagnostics::{adf_test, composite_score, spectral_entropy, vov};
use dpr::par::Execution;
use dpr::train::{batch_gradients, PreparedData};
use dpr::Tensor;

fn series(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn tiny_model(seed: u64) -> DprNetModel {
    let mut cfg = ModelConfig::new(32, 8, 2).with_d_model(16);
    cfg.patch_len = 8;
    cfg.stride = 4;
    let mut model = DprNetModel::new(cfg, seed).unwrap();
    for a in model.blocks.iter().filter_map(|b| b.adapter.as_ref()) {
        *model.store.get_mut(a.params.gamma) = Tensor::scalar(0.4);
    }
    model
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_lie_on_simplex(v in prop::collection::vec(-300.0f64..300.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], v).unwrap());
        let p = tape.softmax_lastdim(x).unwrap();
        for row in tape.value(p).data().chunks(4) {
            prop_assert!(row.iter().all(|&q| q >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_conv_keeps_channels_apart(
        v in prop::collection::vec(-2.0f64..2.0, 3 * 10),
        k in prop::collection::vec(-1.0f64..1.0, 3 * 5),
        c in 0usize..3,
        bump in 0.5f64..2.0,
    ) {
        let run = |x: Vec<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(&[1, 3, 10], x).unwrap());
            let kv = tape.constant(Tensor::new(&[3, 5], k.clone()).unwrap());
            let y = tape.depthwise_conv1d(xv, kv).unwrap();
            tape.value(y).data().to_vec()
        };
        let base = run(v.clone());
        let mut moved = v;
        for t in 0..10 {
            moved[c * 10 + t] += bump;
        }
        let out = run(moved);
        for ch in 0..3 {
            if ch != c {
                prop_assert_eq!(&base[ch * 10..ch * 10 + 10], &out[ch * 10..ch * 10 + 10]);
            }
        }
    }

    #[test]
    fn patch_count_matches_padding_rule(t in 1usize..80, p in 1usize..20, s in 1usize..10) {
        prop_assume!(t >= p);
        let x = Tensor::from_fn(&[2, t], |i| i as f64);
        let out = patchify(&x, p, s).unwrap();
        let expect = (t - p).div_ceil(s) + 1;
        prop_assert_eq!(out.shape(), &[2, expect, p]);
    }

    #[test]
    fn vov_is_affine_invariant(x in series(300), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (vx, vy) = (vov(&x, 24).unwrap(), vov(&y, 24).unwrap());
        prop_assert!((vx - vy).abs() <= 1e-8 * vx.abs().max(1.0), "{} vs {}", vx, vy);
    }

    #[test]
    fn spectral_entropy_ignores_scale_and_offset(x in series(256), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (hx, hy) = (spectral_entropy(&x).unwrap(), spectral_entropy(&y).unwrap());
        prop_assert!((0.0..=1.0).contains(&hx));
        prop_assert!((hx - hy).abs() < 1e-9, "{} vs {}", hx, hy);
    }

    #[test]
    fn composite_score_invariant_to_monotone_transforms(
        items in prop::collection::vec((0.0f64..1.0, 0.1f64..3.0), 2..10)
    ) {
        let named = |f: &dyn Fn(f64) -> f64, g: &dyn Fn(f64) -> f64| -> Vec<(String, f64, f64)> {
            items.iter().enumerate().map(|(i, &(h, v))| (format!("d{i}"), f(h), g(v))).collect()
        };
        let plain = composite_score(&named(&|h| h, &|v| v)).unwrap();
        let warped = composite_score(&named(&|h| 3.0 * h + 1.0, &|v| v.ln())).unwrap();
        for row in &plain {
            let other = warped.iter().find(|r| r.dataset == row.dataset).unwrap();
            prop_assert_eq!(row.score, other.score);
        }
        for w in plain.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adf_statistic_is_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in -10.0f64..10.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0];
        for _ in 1..400 {
            let last = *x.last().unwrap();
            x.push(0.8 * last + rng.random_range(-1.0..1.0));
        }
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (rx, ry) = (adf_test(&x).unwrap(), adf_test(&y).unwrap());
        prop_assert!((rx.statistic - ry.statistic).abs() < 1e-6 * rx.statistic.abs().max(1.0));
        prop_assert_eq!(rx.lags, ry.lags);
    }

    #[test]
    fn sequential_and_parallel_gradients_are_bit_identical(seed in 0u64..50, dropout in any::<bool>()) {
        let (frame, _) = make_regime_synthetic(seed, 600, &RegimeSpec { channels: 2, ..RegimeSpec::default() }).unwrap();
        let data = PreparedData::new(&frame, [0.7, 0.1, 0.2], 32, 8).unwrap();
        let model = tiny_model(seed);
        let origins: Vec<usize> = (0..37).map(|i| (i * 7 + seed as usize) % 300).collect();
        let key = dropout.then_some((seed, 1, 2));
        let seq = batch_gradients(&model, &data, &origins, 8, key, Execution::Sequential).unwrap();
        let par = batch_gradients(&model, &data, &origins, 8, key, Execution::Parallel).unwrap();
        prop_assert_eq!(seq.0.to_bits(), par.0.to_bits());
        prop_assert_eq!(seq.1, par.1);
    }
}

#[test]
fn seeded_construction_is_deterministic() {
    let spec = RegimeSpec::rapid();
    assert_eq!(make_regime_synthetic(4, 1024, &spec).unwrap(), make_regime_synthetic(4, 1024, &spec).unwrap());
    assert_ne!(
        make_regime_synthetic(4, 1024, &spec).unwrap().0,
        make_regime_synthetic(5, 1024, &spec).unwrap().0
    );
    assert_eq!(tiny_model(9), tiny_model(9));
    assert_ne!(tiny_model(9).store, tiny_model(10).store);
}

#[test]
fn rapid_schedule_puts_both_regimes_in_every_split() {
    use dpr::data::{Regime, SplitRanges};
    for seed in 0..5 {
        let (_, blocks) = make_regime_synthetic(seed, 2048, &RegimeSpec::rapid()).unwrap();
        let ranges = SplitRanges::new(2048, [0.7, 0.1, 0.2]).unwrap();
        for (a, b) in [ranges.train, ranges.val, ranges.test] {
            let seen = |r: Regime| blocks.iter().any(|k| k.regime == r && k.start < b && k.end > a);
            assert!(seen(Regime::Calm) && seen(Regime::Burst), "seed {seed}: split {a}..{b}");
        }
    }
}

#[test]
fn training_history_is_seeded_and_mode_independent() {
    use dpr::train::{train, TrainConfig};
    let (frame, _) = make_regime_synthetic(2, 600, &RegimeSpec { channels: 2, ..RegimeSpec::default() }).unwrap();
    let data = PreparedData::new(&frame, [0.7, 0.1, 0.2], 32, 8).unwrap();
    let cfg = TrainConfig { max_epochs: 3, seed: 4, ..TrainConfig::default() };
    let a = train(tiny_model(1), &data, &cfg, Execution::Sequential).unwrap();
    let b = train(tiny_model(1), &data, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    let c = train(tiny_model(1), &data, &TrainConfig { seed: 5, ..cfg }, Execution::Sequential).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn soft_routing_approaches_hard_at_low_temperature() {
    use dpr::adapter::RoutingMode;
    let x = Tensor::from_fn(&[2, 32, 2], |i| ((i * 13 % 17) as f64 - 8.0) / 3.0);
    let gap = |log_tau: f64| {
        let mut soft = tiny_model(3);
        let ids: Vec<_> = soft.blocks.iter().filter_map(|b| b.adapter.as_ref()).map(|a| a.params.log_tau).collect();
        for id in ids {
            *soft.store.get_mut(id) = Tensor::scalar(log_tau);
        }
        let mut hard = soft.clone();
        for b in &mut hard.blocks {
            if let Some(a) = b.adapter.as_mut() {
                a.config.routing = RoutingMode::Hard;
            }
        }
        soft.predict(&x).unwrap().max_abs_diff(&hard.predict(&x).unwrap())
    };
    let gaps: Vec<f64> = [3.0, 6.0, 9.0, 13.0].into_iter().map(gap).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gaps[3] < 1e-12, "{gaps:?}");
}

#[test]
fn adf_p_value_is_affine_invariant() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    for phi in [0.3, 0.9, 1.0] {
        let mut x = vec![0.0];
        for _ in 1..500 {
            let last = *x.last().unwrap();
            x.push(phi * last + rng.random_range(-1.0..1.0));
        }
        let base = adf_test(&x).unwrap();
        for (a, b) in [(1e-3, 5.0), (7.0, -2.0), (1e3, 1e3)] {
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r = adf_test(&y).unwrap();
            assert!((r.p_value - base.p_value).abs() < 1e-9, "phi {phi} a {a}: {} vs {}", r.p_value, base.p_value);
        }
    }
}
