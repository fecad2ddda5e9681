//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use mkis_core::{ModelConfig, Sample, Tensor};

/// Direct-loop convolution; per output element the taps are summed over
/// `(ci, ky, kx)` in order, skipping taps that fall in the padding.
pub fn brute_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: usize) -> Tensor<f64> {
    let [b, cin, h, w] = x.dims4("oracle").unwrap();
    let [cout, _, kh, kw] = k.dims4("oracle").unwrap();
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((bi * cin + ci) * h + iy as usize) * w + ix as usize];
                                acc += kd[((co * cin + ci) * kh + ky) * kw + kx] * xv;
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, cout, ho, wo], out).unwrap()
}

/// Gather-form transposed convolution with a `Cin×Cout×K×K` kernel:
/// `y[o, oy, ox] = Σ_{ky,kx} Σ_i x[i, (oy+p-ky)/s, (ox+p-kx)/s] · k[i, o, ky, kx]`
/// over taps that land on an input pixel.
pub fn brute_conv_transpose2d(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: usize) -> Tensor<f64> {
    let [b, cin, h, w] = x.dims4("oracle").unwrap();
    let [_, cout, kh, kw] = k.dims4("oracle").unwrap();
    let ho = (h - 1) * stride + kh - 2 * padding;
    let wo = (w - 1) * stride + kw - 2 * padding;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * cout * ho * wo];
    let source = |o: usize, tap: usize, n: usize| -> Option<usize> {
        let t = o as isize + padding as isize - tap as isize;
        if t < 0 || t % stride as isize != 0 {
            return None;
        }
        let i = (t / stride as isize) as usize;
        (i < n).then_some(i)
    };
    for bi in 0..b {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (Some(iy), Some(ix)) = (source(oy, ky, h), source(ox, kx, w)) else {
                                continue;
                            };
                            let mut inner = 0.0;
                            for i in 0..cin {
                                inner += kd[((i * cout + o) * kh + ky) * kw + kx] * xd[((bi * cin + i) * h + iy) * w + ix];
                            }
                            acc += inner;
                        }
                    }
                    out[((bi * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, cout, ho, wo], out).unwrap()
}

/// Per-pixel tally `(tp, tn, fp, fn)`.
pub fn brute_confusion(pred: &[u8], gt: &[u8], mask: Option<&[bool]>) -> (u64, u64, u64, u64) {
    let mut t = (0, 0, 0, 0);
    for i in 0..pred.len() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        if pred[i] == 1 && gt[i] == 1 {
            t.0 += 1;
        } else if pred[i] == 0 && gt[i] == 0 {
            t.1 += 1;
        } else if pred[i] == 1 {
            t.2 += 1;
        } else {
            t.3 += 1;
        }
    }
    t
}

/// O(n²) AUC: fraction of positive/negative pairs ranked correctly, ties ½.
pub fn pairwise_auc(scores: &[f64], gt: &[u8], mask: Option<&[bool]>) -> f64 {
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let pos: Vec<f64> = (0..scores.len()).filter(|&i| keep(i) && gt[i] == 1).map(|i| scores[i]).collect();
    let neg: Vec<f64> = (0..scores.len()).filter(|&i| keep(i) && gt[i] == 0).map(|i| scores[i]).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// Per-class pixel counting straight from the definition of the weights.
pub fn brute_median_weights(labels: &[(Vec<u8>, Option<Vec<bool>>)]) -> (Vec<f64>, Vec<f64>) {
    let mut freq = Vec::new();
    for class in 0..2u8 {
        let (mut num, mut den) = (0u64, 0u64);
        for (label, mask) in labels {
            let counted: Vec<u8> = label
                .iter()
                .enumerate()
                .filter(|(i, _)| mask.as_ref().map_or(true, |m| m[*i]))
                .map(|(_, &v)| v)
                .collect();
            let here = counted.iter().filter(|&&v| v == class).count() as u64;
            if here > 0 {
                num += here;
                den += counted.len() as u64;
            }
        }
        freq.push(num as f64 / den as f64);
    }
    let median = (freq[0] + freq[1]) / 2.0;
    let w = freq.iter().map(|f| median / f).collect();
    (freq, w)
}

/// A 64×64 vessel-like sample: thin bright curves on a dark textured
/// background, with a circular field-of-view mask.
pub fn vessel_sample(size: usize, channels: usize) -> Sample {
    let c = (size as f64 - 1.0) / 2.0;
    let mut image = Vec::with_capacity(size * size * channels);
    let mut label = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let curve1 = (fy - (c + 12.0 * (fx / 9.0).sin())).abs();
            let curve2 = (fx - (c * 0.6 + 8.0 * (fy / 7.0).cos())).abs();
            let vessel = curve1 < 1.5 || curve2 < 1.2;
            let texture = 0.08 * ((fx * 0.7).sin() * (fy * 1.3).cos());
            let v = if vessel { 0.75 + texture } else { 0.25 + texture };
            for _ in 0..channels {
                image.push(v as f32);
            }
            label.push(u8::from(vessel));
            mask.push((fx - c).powi(2) + (fy - c).powi(2) <= (c + 0.5).powi(2));
        }
    }
    Sample::new("vessel", (size, size, channels), image, label, Some(mask)).unwrap()
}

/// Narrow configuration for tests that only need the topology.
pub fn narrow_config(width: usize) -> ModelConfig {
    ModelConfig {
        width,
        ..ModelConfig::default()
    }
}

pub struct ConvTrial {
    pub shapes: usize,
    pub conv_exact: usize,
    pub transpose_exact: usize,
    pub max_adjoint_rel: f64,
}

/// Random small convolution geometries; counts exact agreements with the
/// oracles and tracks the worst adjointness defect.
pub fn conv_trials(n: usize, seed: u64) -> ConvTrial {
    use mkis_core::tensor::kernels::{conv2d, conv2d_input_grad, conv_transpose2d};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut t = ConvTrial {
        shapes: 0,
        conv_exact: 0,
        transpose_exact: 0,
        max_adjoint_rel: 0.0,
    };
    while t.shapes < n {
        let b = rng.random_range(1..=2);
        let cin = rng.random_range(1..=4);
        let cout = rng.random_range(1..=4);
        let kh = rng.random_range(1..=5);
        let kw = rng.random_range(1..=5);
        let stride = rng.random_range(1..=3);
        let padding = rng.random_range(0..kh.min(kw));
        let h = rng.random_range(kh.max(1)..=9);
        let w = rng.random_range(kw.max(1)..=9);
        t.shapes += 1;

        let x = Tensor::<f64>::uniform(&[b, cin, h, w], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[cout, cin, kh, kw], -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &k, stride, padding, None).unwrap();
        if y == brute_conv2d(&x, &k, stride, padding) {
            t.conv_exact += 1;
        }

        // transposed convolution of a random map with a Cin×Cout kernel
        let xt = Tensor::<f64>::uniform(&[b, cin, h, w], -1.0, 1.0, &mut rng);
        let kt = Tensor::<f64>::uniform(&[cin, cout, kh, kw], -1.0, 1.0, &mut rng);
        if (h - 1) * stride + kh > 2 * padding && (w - 1) * stride + kw > 2 * padding {
            let yt = conv_transpose2d(&xt, &kt, stride, padding, None).unwrap();
            if yt == brute_conv_transpose2d(&xt, &kt, stride, padding) {
                t.transpose_exact += 1;
            }
        } else {
            t.transpose_exact += 1;
        }

        // ⟨conv(x), g⟩ = ⟨x, conv_input_grad(g)⟩ with conv_input_grad the transposed map
        let g = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let lhs = y.dot(&g);
        let rhs = x.dot(&conv2d_input_grad(&g, &k, (h, w), stride, padding, None).unwrap());
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        t.max_adjoint_rel = t.max_adjoint_rel.max(rel);
        if (h + 2 * padding - kh) % stride == 0 && (w + 2 * padding - kw) % stride == 0 {
            // here the transposed convolution maps back onto x's geometry exactly
            let back = conv_transpose2d(&g, &k, stride, padding, None).unwrap();
            assert_eq!(back.shape(), x.shape());
            let rhs = x.dot(&back);
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
            t.max_adjoint_rel = t.max_adjoint_rel.max(rel);
        }
    }
    t
}

/// Measures the receptive field empirically: the side of the bounding box of
/// input pixels with a nonzero gradient of the encoder's centre activation.
///
/// Runs in inference mode with positive weights and large batch-norm
/// offsets so every ReLU is open and no path is cut.
pub fn probe_receptive_field(config: &ModelConfig, size: usize) -> (usize, usize) {
    use mkis_core::{Graph, Mode, Model};
    let mut model = Model::<f64>::build(config.clone(), 1).unwrap();
    for (name, p) in model.params_mut() {
        if name.ends_with(".bn.beta") {
            p.data_mut().fill(50.0);
        } else if name.ends_with(".weight") {
            p.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.01);
        }
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let input = g.param(Tensor::zeros(&[1, config.in_channels, size, size]));
    let stages = model.forward_stages(&mut g, &vars, input, Mode::Infer, 0).unwrap();
    let shape = g.value(stages.encoder).shape().to_vec();
    let (eh, ew) = (shape[2], shape[3]);
    let pick = Tensor::from_fn(&shape, |i| {
        let p = i % (eh * ew);
        if p == (eh / 2) * ew + ew / 2 {
            1.0
        } else {
            0.0
        }
    });
    let pick = g.constant(pick);
    let prod = g.mul(stages.encoder, pick).unwrap();
    let out = g.sum(prod).unwrap();
    g.backward(out).unwrap();
    let grad = g.grad(input).unwrap();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, v) in grad.data().iter().enumerate() {
        if *v != 0.0 {
            let p = i % (size * size);
            let (y, x) = (p / size, p % size);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    assert!(y0 > 0 && x0 > 0 && y1 + 1 < size && x1 + 1 < size, "footprint touches the border");
    (y1 - y0 + 1, x1 - x0 + 1)
}
