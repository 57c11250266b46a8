mod common;

use common::layer_errors;

use proptest::prelude::*;
use snnc_core::encoder::{
    activation_radix, encode_input, quantize_network, quantize_weights, requantize, round_shift, QuantConfig,
    SpikeTrainPlane,
};
use snnc_core::model::{FloatTensor, InputShape};

/// `floor(psum / 2^shift + 1/2)` in exact integer arithmetic.
fn exact_round_half_up(psum: i64, shift: u32) -> i64 {
    let num = 2 * psum as i128 + (1i128 << shift);
    num.div_euclid(1i128 << (shift + 1)) as i64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn encoding_error_is_at_most_half_a_level(
        values in prop::collection::vec(0.0f64..4.0, 1000),
        t in 1u32..=8,
    ) {
        let r = activation_radix(4.0, t);
        let n = values.len();
        let x = FloatTensor::new(vec![n, 1, 1], values.clone()).unwrap();
        let shape = InputShape { channels: n, height: 1, width: 1 };
        if r < 1 {
            return Ok(());
        }
        let enc = encode_input(&x, shape, r, t).unwrap();
        let scale = 2f64.powi(r) - 1.0;
        let max = (1u32 << t) - 1;
        for (v, &q) in values.iter().zip(&enc.values) {
            prop_assert!(q <= max);
            if v * scale <= max as f64 {
                prop_assert!((v * scale - q as f64).abs() <= 0.5 + 1e-9, "v={} q={}", v, q);
            }
        }
    }

    #[test]
    fn encoding_is_monotone(mut values in prop::collection::vec(0.0f32..8.0, 2..200), t in 1u32..=8, r in 1i32..=6) {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = values.len();
        let x = FloatTensor::new(vec![n, 1, 1], values).unwrap();
        let enc = encode_input(&x, InputShape { channels: n, height: 1, width: 1 }, r, t).unwrap();
        prop_assert!(enc.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn requantize_matches_exact_rounding(
        pairs in prop::collection::vec((-(1i64 << 40)..(1i64 << 40), 0u32..24), 1000),
        t in 1u32..=8,
    ) {
        for (psum, shift) in pairs {
            let exact = exact_round_half_up(psum, shift);
            prop_assert_eq!(round_shift(psum, shift), exact);
            prop_assert_eq!(requantize(psum, shift, t) as i64, exact.clamp(0, (1 << t) - 1));
        }
    }

    #[test]
    fn weights_round_to_nearest_within_range(
        values in prop::collection::vec(-2.0f64..2.0, 1..300),
        bits in 1u32..=8,
        r_wgt in -2i32..=6,
    ) {
        let cfg = QuantConfig::new(bits, 4, 3.0).unwrap();
        let n = values.len();
        let w = FloatTensor::new(vec![n], values.clone()).unwrap();
        let q = quantize_weights(&w, r_wgt, &cfg);
        let scale = 2f64.powi(r_wgt);
        let mut clamped = 0;
        for (v, &qi) in values.iter().zip(&q.data) {
            prop_assert!((cfg.weight_min()..=cfg.weight_max()).contains(&qi));
            let exact = v * scale;
            if exact.round() < cfg.weight_min() as f64 || exact.round() > cfg.weight_max() as f64 {
                clamped += 1;
            } else {
                prop_assert!((exact - qi as f64).abs() <= 0.5);
            }
        }
        prop_assert_eq!(q.clamped, clamped);
    }

    #[test]
    fn planes_roundtrip(values in prop::collection::vec(0u32..64, 1..50), extra in 0u32..3) {
        let t = 6 + extra;
        let n = values.len();
        let p = SpikeTrainPlane::new(t, n, 1, values).unwrap();
        let planes: Vec<Vec<bool>> = (0..t).map(|s| p.plane(s)).collect();
        prop_assert_eq!(SpikeTrainPlane::from_planes(n, 1, &planes).unwrap(), p);
    }
}

#[test]
fn round_shift_ties_go_up() {
    assert_eq!(round_shift(5, 1), 3);
    assert_eq!(round_shift(-5, 1), -2);
    assert_eq!(round_shift(6, 2), 2);
    assert_eq!(round_shift(-6, 2), -1);
    assert_eq!(requantize(-100, 3, 4), 0);
    assert_eq!(requantize(1000, 3, 4), 15);
}

#[test]
fn error_halves_per_time_step() {
    let errors: Vec<Vec<f64>> = (3..=7).map(layer_errors).collect();
    for l in 0..errors[0].len() {
        // Geometric mean of the per-step factors from T = 3 to T = 7.
        let factor = (errors[0][l] / errors[4][l]).powf(0.25);
        assert!((1.8..=2.2).contains(&factor), "layer {l}: factor {factor:.3}");
        assert!(errors.windows(2).all(|w| w[1][l] < w[0][l]), "layer {l} error not decreasing");
    }
}

#[test]
fn lenet_quantization_is_deterministic() {
    let net = common::lenet();
    let samples = common::calibration(&net);
    let cfg = QuantConfig::new(3, 4, 3.0).unwrap();
    let (a, ra) = quantize_network(&net, &samples, &cfg, false).unwrap();
    let (b, rb) = quantize_network(&net, &samples, &cfg, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    for l in &a.layers {
        if let Some(w) = &l.weights {
            assert!(w.data.iter().all(|&v| (-4..=3).contains(&v)));
        }
    }
}
