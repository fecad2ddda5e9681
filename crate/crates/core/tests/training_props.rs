mod common;

use common::brute_median_weights;
use indexmap::IndexMap;
use mkis_core::training::{adam_step, AdamConfig, AdamState, ClassFrequencies};
use mkis_core::Tensor;
use proptest::prelude::*;

fn single(v: f64) -> IndexMap<String, Tensor<f64>> {
    [("w".to_string(), Tensor::scalar(v))].into_iter().collect()
}

/// Runs Adam on one scalar with the given gradient sequence and returns the
/// absolute size of every update.
fn updates(grads: &[f64], lr: f64) -> Vec<f64> {
    let cfg = AdamConfig::default();
    let mut p = single(0.0);
    let mut s = AdamState::new(&p);
    grads
        .iter()
        .map(|&g| {
            let before = p["w"].data()[0];
            adam_step(&mut p, &single(g), &mut s, lr, &cfg).unwrap();
            (p["w"].data()[0] - before).abs()
        })
        .collect()
}

/// Cauchy-Schwarz bound on `|m̂| / sqrt(v̂)` after `t` steps.
fn cs_bound(t: u64, cfg: &AdamConfig) -> f64 {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let r = b1 * b1 / b2;
    let series: f64 = (0..t).map(|j| r.powi(j as i32)).sum();
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    (1.0 - b1) / (1.0 - b2).sqrt() * series.sqrt() * bc2.sqrt() / bc1
}

#[test]
fn quadratic_bowl_converges() {
    let cfg = AdamConfig::default();
    let mut p = single(1.0);
    let mut s = AdamState::new(&p);
    let mut reached = None;
    for step in 1..=200 {
        let theta = p["w"].data()[0];
        adam_step(&mut p, &single(2.0 * theta), &mut s, 0.1, &cfg).unwrap();
        if reached.is_none() && p["w"].data()[0].abs() < 0.05 {
            reached = Some(step);
        }
    }
    assert!(reached.is_some(), "theta = {}", p["w"].data()[0]);
    assert!(p["w"].data()[0].abs() < 0.05);
}

#[test]
fn first_step_and_constant_gradient_move_at_most_lr() {
    for g in [1e-6, 0.3, -7.0, 1e4] {
        for (t, u) in updates(&[g; 50], 0.01).into_iter().enumerate() {
            assert!(u <= 0.01 * (1.0 + 1e-6), "step {t}: {u}");
        }
    }
}

#[test]
fn a_gradient_after_a_long_quiet_run_exceeds_lr() {
    // bias correction of v̂ lags m̂ here, so no bound of lr holds in general
    let mut grads = vec![0.0; 10_000];
    grads.push(1.0);
    let u = *updates(&grads, 0.01).last().unwrap();
    assert!(u > 0.01 * 3.0, "{u}");
    assert!(u <= 0.01 * cs_bound(10_001, &AdamConfig::default()) * (1.0 + 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn updates_respect_the_cauchy_schwarz_bound(grads in prop::collection::vec(-10.0f64..10.0, 1..120)) {
        let cfg = AdamConfig::default();
        for (i, u) in updates(&grads, 0.01).into_iter().enumerate() {
            prop_assert!(u <= 0.01 * cs_bound(i as u64 + 1, &cfg) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn median_weights_match_brute_force(
        images in prop::collection::vec(
            (prop::collection::vec(0u8..2, 30), prop::option::of(prop::collection::vec(any::<bool>(), 30))),
            3,
        ),
    ) {
        let mut images = images;
        // both classes must be present somewhere inside the masks
        images[0].0[0] = 0;
        images[0].0[1] = 1;
        if let Some(m) = images[0].1.as_mut() {
            m[0] = true;
            m[1] = true;
        }
        let mut freqs = ClassFrequencies::new(2);
        for (label, mask) in &images {
            freqs.add(label, mask.as_deref()).unwrap();
        }
        let (want_f, want_w) = brute_median_weights(&images);
        let got_f = freqs.frequencies().unwrap();
        let got_w = freqs.weights().unwrap();
        for ((gf, wf), (gw, ww)) in got_f.iter().zip(&want_f).zip(got_w.as_slice().iter().zip(&want_w)) {
            prop_assert!((gf - wf).abs() <= 1e-15);
            prop_assert!((gw - ww).abs() <= 1e-12 * ww);
        }
        // the weighted frequency of every class equals the median
        let median = (want_f[0] + want_f[1]) / 2.0;
        for (w, f) in got_w.as_slice().iter().zip(&got_f) {
            prop_assert!((w * f - median).abs() <= 1e-14);
        }
    }
}
