//! Property tests over the public API: decomposition, normalization, loss,
//! windowing and configuration.

use dmamba::config::TrainConfig;
use dmamba::data::{make_windows, split_and_standardize, RawSeries, Split};
use dmamba::decomp::ema_decompose;
use dmamba::loss::{arctan_weights, loss, metrics, LossKind};
use dmamba::model::{ModelConfig, Variant};
use dmamba::revin;
use dmamba::tensor::{Tape, Tensor};
use dmamba::{Model, ModelF32};
use proptest::prelude::*;

fn series_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..24, 1usize..4).prop_flat_map(|(l, d)| (Just(l), Just(d), prop::collection::vec(-50.0f64..50.0, l * d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn seasonal_vanishes_for_alpha_one((l, d, xs) in series_strategy()) {
        let tape = Tape::<f64>::new();
        let dec = ema_decompose(tape.constant(Tensor::from_f64(&[1, l, d], &xs).unwrap()), 1.0).unwrap();
        prop_assert!(dec.seasonal.value().data().iter().all(|&v| v == 0.0));
        prop_assert_eq!(dec.trend.value().to_f64_vec(), xs);
    }

    #[test]
    fn trend_stays_within_the_running_range((l, d, xs) in series_strategy(), alpha in 0.01f64..1.0) {
        let tape = Tape::<f64>::new();
        let dec = ema_decompose(tape.constant(Tensor::from_f64(&[1, l, d], &xs).unwrap()), alpha).unwrap();
        let trend = dec.trend.value();
        for c in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for t in 0..l {
                lo = lo.min(xs[t * d + c]);
                hi = hi.max(xs[t * d + c]);
                let v = trend.data()[t * d + c];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn revin_round_trip((l, d, xs) in series_strategy(), shift in -1e3f64..1e3) {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_f64(&[1, l, d], &xs.iter().map(|v| v + shift).collect::<Vec<_>>()).unwrap();
        let gamma = tape.constant(Tensor::ones(&[d]));
        let beta = tape.constant(Tensor::zeros(&[d]));
        let (y, state) = revin::normalize(tape.constant(x.clone()), Some((gamma, beta)), 1e-5).unwrap();
        let back = revin::denormalize(y, Some((gamma, beta)), &state).unwrap();
        prop_assert!(back.value().max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn revin_output_is_shift_invariant((l, d, xs) in series_strategy(), shift in -1e3f64..1e3) {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_f64(&[1, l, d], &xs).unwrap();
        let moved = x.map(|v| v + shift);
        let (a, _) = revin::normalize(tape.constant(x), None, 1e-5).unwrap();
        let (b, _) = revin::normalize(tape.constant(moved), None, 1e-5).unwrap();
        prop_assert!(a.value().max_abs_diff(&b.value()) < 1e-7);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_at_target(t in 1usize..12, d in 1usize..4, seed in 0u64..1000) {
        let n = 2 * t * d;
        let p: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) as f64 * 0.61).sin()).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i as u64 * 17 + seed) as f64 * 0.43).cos()).collect();
        let (p, y) = (Tensor::from_f64(&[2, t, d], &p).unwrap(), Tensor::from_f64(&[2, t, d], &y).unwrap());
        for kind in [LossKind::Arctan, LossKind::Mae, LossKind::Mse] {
            let tape = Tape::<f64>::new();
            prop_assert!(loss(kind, tape.var(p.clone()), &y).unwrap().value().item() >= 0.0);
            prop_assert_eq!(loss(kind, tape.var(y.clone()), &y).unwrap().value().item(), 0.0);
        }
        // weights never exceed one, so the weighted loss is bounded by MAE
        let tape = Tape::<f64>::new();
        let w = loss(LossKind::Arctan, tape.var(p.clone()), &y).unwrap().value().item();
        prop_assert!(w <= metrics(&p, &y).unwrap().1 + 1e-15);
    }

    #[test]
    fn windows_tile_the_split(len in 10usize..80, l in 1usize..8, t in 1usize..8, stride in 1usize..4) {
        prop_assume!(l + t <= len);
        let ts = (0..len).map(|i| format!("{i:04}")).collect();
        let s = RawSeries::new(ts, (0..len).map(|i| i as f64).collect(), vec!["v".into()]).unwrap();
        let w = make_windows(&s, l, t, stride, Split::Train).unwrap();
        prop_assert_eq!(w.len(), (len - l - t) / stride + 1);
        for i in 0..w.len() {
            let start = (i * stride) as f64;
            let want_x: Vec<f64> = (0..l).map(|k| start + k as f64).collect();
            let want_y: Vec<f64> = (0..t).map(|k| start + (l + k) as f64).collect();
            prop_assert_eq!(w.input(i), &want_x[..]);
            prop_assert_eq!(w.target(i), &want_y[..]);
        }
    }

    #[test]
    fn standardized_train_split_has_unit_moments(len in 30usize..200, scale in 0.5f64..100.0) {
        let ts = (0..len).map(|i| format!("{i:04}")).collect();
        let vals = (0..len).map(|i| scale * (i as f64 * 0.7).sin() + 3.0).collect();
        let s = RawSeries::new(ts, vals, vec!["v".into()]).unwrap();
        let ([train, _, _], _) = split_and_standardize(&s, (0.6, 0.2, 0.2)).unwrap();
        let n = train.len() as f64;
        let mean = train.values.iter().sum::<f64>() / n;
        let var = train.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn loss_weights_decay_from_one() {
    let w = arctan_weights(96).unwrap();
    assert_eq!(w[0], 1.0);
    assert!(w.windows(2).all(|p| p[1] < p[0]));
}

#[test]
fn config_text_round_trip_with_every_variant() {
    for v in Variant::ALL {
        let mut c = TrainConfig::default();
        c.model.variant = v;
        c.model.revin_affine = false;
        c.split_ratios = Some((0.7, 0.1, 0.2));
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }
}

#[test]
fn single_precision_model_tracks_double() {
    let cfg = ModelConfig {
        seq_len: 16,
        pred_len: 8,
        channels: 3,
        d_model: 16,
        d_state: 4,
        d_ff: 16,
        e_layers: 1,
        ..ModelConfig::default()
    };
    let x = Tensor::from_fn(&[2, 16, 3], |i| (i as f64 * 0.3).sin() * 2.0 + 1.0);
    let y64 = Model::new(cfg.clone(), 3).unwrap().predict(&x).unwrap();
    let y32 = ModelF32::new(cfg, 3).unwrap().predict(&x.convert::<f32>()).unwrap();
    assert!(y32.is_finite());
    let diff = y32.convert::<f64>().max_abs_diff(&y64);
    assert!(diff < 1e-4, "{diff}");
}
