mod common;

use common::{brute_conv2d, brute_conv_transpose2d, conv_trials};
use mkis_core::tensor::kernels::{conv2d, conv_transpose2d};
use mkis_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;

#[test]
fn two_hundred_random_shapes_match_exactly() {
    let t = conv_trials(200, 11);
    assert_eq!(t.conv_exact, 200);
    assert_eq!(t.transpose_exact, 200);
    assert!(t.max_adjoint_rel < 1e-6, "{}", t.max_adjoint_rel);
}

fn abs(t: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(t.shape(), t.data().iter().map(|v| v.abs()).collect()).unwrap()
}

#[test]
fn single_precision_within_tolerance() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::uniform(&[2, 5, 11, 9], -1.0, 1.0, &mut rng);
    let k = Tensor::<f64>::uniform(&[3, 5, 5, 5], -1.0, 1.0, &mut rng);
    let want = brute_conv2d(&x, &k, 1, 2);
    // per-element magnitude of the summed products, so cancellation is not penalized
    let scale = brute_conv2d(&abs(&x), &abs(&k), 1, 2);
    let got = conv2d(&x.cast::<f32>(), &k.cast::<f32>(), 1, 2, None).unwrap();
    for ((a, b), s) in got.data().iter().zip(want.data()).zip(scale.data()) {
        let rel = (*a as f64 - b).abs() / s;
        assert!(rel < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn decoder_geometry_doubles_resolution() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::uniform(&[1, 3, 5, 6], -1.0, 1.0, &mut rng);
    let k = Tensor::<f64>::uniform(&[3, 2, 4, 4], -1.0, 1.0, &mut rng);
    let y = conv_transpose2d(&x, &k, 2, 1, None).unwrap();
    assert_eq!(y.shape(), &[1, 2, 10, 12]);
    assert_eq!(y, brute_conv_transpose2d(&x, &k, 2, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjointness_holds(
        cin in 1usize..4, cout in 1usize..4, k in 1usize..5, stride in 1usize..3,
        h in 5usize..9, w in 5usize..9, seed in any::<u64>(),
    ) {
        let padding = (k - 1) / 2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(&[1, cin, h, w], -1.0, 1.0, &mut rng);
        let kern = Tensor::<f64>::uniform(&[cout, cin, k, k], -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &kern, stride, padding, None).unwrap();
        let g = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let back = mkis_core::tensor::kernels::conv2d_input_grad(&g, &kern, (h, w), stride, padding, None).unwrap();
        let (lhs, rhs) = (y.dot(&g), x.dot(&back));
        prop_assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()).max(1e-9));
    }

    #[test]
    fn same_padding_preserves_size(k in prop::sample::select(vec![1usize, 3, 5, 7, 11]), h in 1usize..20, w in 1usize..20) {
        let x = Tensor::<f32>::zeros(&[1, 1, h.max(k), w.max(k)]);
        let kern = Tensor::<f32>::zeros(&[1, 1, k, k]);
        let y = conv2d(&x, &kern, 1, (k - 1) / 2, None).unwrap();
        prop_assert_eq!(&y.shape()[2..], &x.shape()[2..]);
    }
}
