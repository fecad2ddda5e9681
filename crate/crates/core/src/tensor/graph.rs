//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor produced while it is alive. Operations are
//! appended in execution order; [`Graph::backward`] walks them in exact reverse
//! order and accumulates gradients additively, so a value consumed by `k`
//! operations receives the sum of `k` contributions. Operations whose inputs
//! are all constants are evaluated but not recorded.
//!
//! A graph is single-threaded; kernels may parallelise internally.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{Float, Mode, Tensor, TensorError};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    /// Elementwise multiply by a fixed per-element factor (dropout masks,
    /// user-supplied derivatives).
    Scale {
        x: Var,
        factor: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Sum {
        x: Var,
    },
    /// Scalar loss whose gradient w.r.t. `x` was computed during the forward pass.
    Loss {
        x: Var,
        dx: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, .. } | Op::ConvTranspose2d { x, k, .. } => vec![*x, *k],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x }
            | Op::Scale { x, .. }
            | Op::Softmax { x }
            | Op::Sum { x }
            | Op::Loss { x, .. } => vec![*x],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ChannelBias { x, bias } => vec![*x, *bias],
        }
    }
}

/// Gradient tape and value arena.
pub struct Graph<T: Float> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
    signature: u64,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            signature: FNV_OFFSET,
        }
    }

    /// Adds a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.insert(value, Op::Leaf, false)
    }

    /// Adds a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.insert(value, Op::Leaf, true)
    }

    fn insert(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires = op.inputs().iter().any(|v| self.requires[v.0]);
        let op = if requires { op } else { Op::Leaf };
        Ok(self.insert(value, op, requires))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Hash of every data-dependent branch taken so far (ReLU activation
    /// patterns and log clamps). Two evaluations with equal signatures are
    /// smooth-equivalent, which is what finite-difference checks rely on.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    fn mix(&mut self, bits: impl Iterator<Item = bool>) {
        let mut h = self.signature;
        for b in bits {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.signature = h;
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let y = kernels::conv2d(self.value(x), self.value(k), stride, padding, None)?;
        self.record("conv2d", y, Op::Conv2d { x, k, stride, padding })
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let y = kernels::conv_transpose2d(self.value(x), self.value(k), stride, padding, None)?;
        self.record(
            "conv_transpose2d",
            y,
            Op::ConvTranspose2d { x, k, stride, padding },
        )
    }

    /// Batch normalisation over `B×H×W` per channel.
    ///
    /// In [`Mode::Train`] the batch statistics normalise the input and are
    /// folded into `stats` as an exponential moving average (the variance
    /// enters unbiased). In [`Mode::Infer`] `stats` is used as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
        epsilon: f64,
        momentum: f64,
    ) -> Result<Var, TensorError> {
        const OP: &str = "batch_norm";
        if !(epsilon > 0.0) {
            return Err(TensorError::InvalidParameter {
                op: OP,
                name: "epsilon",
                value: epsilon,
            });
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(TensorError::InvalidParameter {
                op: OP,
                name: "momentum",
                value: momentum,
            });
        }
        let [b, c, h, w] = self.value(x).dims4(OP)?;
        for (v, axis) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).len() != c {
                return Err(TensorError::DimensionMismatch {
                    op: OP,
                    axis,
                    left: c,
                    right: self.value(v).len(),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::DimensionMismatch {
                op: OP,
                axis: "running_stats",
                left: c,
                right: stats.mean.len(),
            });
        }
        let plane = h * w;
        let n = b * plane;
        if mode == Mode::Train && n < 2 {
            return Err(TensorError::DegenerateBatch);
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        match mode {
            Mode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        for &v in &xv[(bi * c + ch) * plane..][..plane] {
                            s += v.as_f64();
                        }
                    }
                    let m = s / n as f64;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        for &v in &xv[(bi * c + ch) * plane..][..plane] {
                            let d = v.as_f64() - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / n as f64;
                }
            }
            Mode::Infer => {
                for ch in 0..c {
                    mean[ch] = stats.mean[ch].as_f64();
                    var[ch] = stats.var[ch].as_f64();
                }
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + epsilon).sqrt())).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                let m = T::lit(mean[ch]);
                for i in off..off + plane {
                    let xh = (xv[i] - m) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if mode == Mode::Train {
            let unbias = n as f64 / (n as f64 - 1.0);
            for ch in 0..c {
                let rm = stats.mean[ch].as_f64();
                let rv = stats.var[ch].as_f64();
                stats.mean[ch] = T::lit((1.0 - momentum) * rm + momentum * mean[ch]);
                stats.var[ch] = T::lit((1.0 - momentum) * rv + momentum * var[ch] * unbias);
            }
        }
        let y = Tensor::new(&[b, c, h, w], out)?;
        self.record(
            OP,
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let y = Tensor::new(
            xv.shape(),
            xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        )?;
        let pattern: Vec<bool> = self.value(x).data().iter().map(|&v| v > T::zero()).collect();
        self.mix(pattern.into_iter());
        self.record("relu", y, Op::Relu { x })
    }

    /// Inverted dropout. The mask is drawn from `seed`, so equal seeds freeze
    /// the mask across evaluations.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, seed: u64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidParameter {
                op: "dropout",
                name: "p",
                value: p,
            });
        }
        if mode == Mode::Infer || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep = T::lit(1.0 / (1.0 - p));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factor: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let y = Tensor::new(
            xv.shape(),
            xv.data().iter().zip(&factor).map(|(&v, &f)| v * f).collect(),
        )?;
        self.record("dropout", y, Op::Scale { x, factor })
    }

    /// Applies `f` elementwise with user-supplied derivative `df`.
    pub fn map(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let y = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())?;
        let factor = xv.data().iter().map(|&v| df(v)).collect();
        self.record("map", y, Op::Scale { x, factor })
    }

    /// Per-pixel softmax over the channel axis, stabilised by max subtraction.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = softmax_channels(self.value(x))?;
        self.record("softmax_channels", y, Op::Softmax { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let y = Tensor::new(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect(),
        )?;
        self.record("add", y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let y = Tensor::new(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect(),
        )?;
        self.record("mul", y, Op::Mul { a, b })
    }

    /// Adds `bias[c]` to every pixel of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "add_channel_bias";
        let [b, c, h, w] = self.value(x).dims4(OP)?;
        if self.value(bias).len() != c {
            return Err(TensorError::DimensionMismatch {
                op: OP,
                axis: "channels",
                left: c,
                right: self.value(bias).len(),
            });
        }
        let plane = h * w;
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let add = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let y = Tensor::new(&[b, c, h, w], out)?;
        self.record(OP, y, Op::ChannelBias { x, bias })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum();
        self.record("sum", Tensor::scalar(s), Op::Sum { x })
    }

    /// Class-weighted negative log-likelihood of `probs` (`B×C×H×W`).
    ///
    /// `loss = -(1/N) Σ w[y] ln(max(p[y], 1e-12))` over the `N` pixels selected
    /// by `mask` (all pixels when `None`).
    pub fn weighted_cross_entropy(
        &mut self,
        probs: Var,
        target: &[u8],
        weights: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        const OP: &str = "weighted_cross_entropy";
        let pv = self.value(probs);
        let (dims, count) = check_loss_inputs(OP, pv, target, weights, mask)?;
        let [b, c, h, w] = dims;
        let plane = h * w;
        let data = pv.data();
        let mut dx = vec![T::zero(); data.len()];
        let mut total = 0.0f64;
        let mut clamps = Vec::new();
        let ln_floor = PROB_FLOOR.ln();
        for bi in 0..b {
            for p in 0..plane {
                let pix = bi * plane + p;
                if !mask.map_or(true, |m| m[pix]) {
                    continue;
                }
                let y = target[pix] as usize;
                let idx = (bi * c + y) * plane + p;
                let py = data[idx].as_f64();
                let wy = weights[y];
                let clamped = py <= PROB_FLOOR;
                clamps.push(clamped);
                if clamped {
                    total += wy * ln_floor;
                } else {
                    total += wy * py.ln();
                    dx[idx] = T::lit(-wy / (count as f64 * py));
                }
            }
        }
        self.mix(clamps.into_iter());
        let loss = Tensor::scalar(T::lit(-total / count as f64));
        self.record(OP, loss, Op::Loss { x: probs, dx })
    }

    /// Fused channel softmax and weighted negative log-likelihood on logits.
    ///
    /// Same value as `weighted_cross_entropy(softmax_channels(logits))`, with
    /// the log-probability computed as `z[y] - logsumexp(z)`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        target: &[u8],
        weights: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        const OP: &str = "softmax_cross_entropy";
        let zv = self.value(logits);
        let (dims, count) = check_loss_inputs(OP, zv, target, weights, mask)?;
        let [b, c, h, w] = dims;
        let plane = h * w;
        let data = zv.data();
        let mut dx = vec![T::zero(); data.len()];
        let mut total = 0.0f64;
        let mut clamps = Vec::new();
        let ln_floor = PROB_FLOOR.ln();
        let mut probs = vec![0.0f64; c];
        for bi in 0..b {
            for p in 0..plane {
                let pix = bi * plane + p;
                if !mask.map_or(true, |m| m[pix]) {
                    continue;
                }
                let y = target[pix] as usize;
                let at = |ch: usize| data[(bi * c + ch) * plane + p].as_f64();
                let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (ch, pr) in probs.iter_mut().enumerate() {
                    *pr = (at(ch) - max).exp();
                    denom += *pr;
                }
                let logp = at(y) - max - denom.ln();
                let wy = weights[y];
                let clamped = logp < ln_floor;
                clamps.push(clamped);
                if clamped {
                    total += wy * ln_floor;
                    continue;
                }
                total += wy * logp;
                let scale = wy / count as f64;
                for ch in 0..c {
                    let onehot = if ch == y { 1.0 } else { 0.0 };
                    dx[(bi * c + ch) * plane + p] = T::lit(scale * (probs[ch] / denom - onehot));
                }
            }
        }
        self.mix(clamps.into_iter());
        let loss = Tensor::scalar(T::lit(-total / count as f64));
        self.record(OP, loss, Op::Loss { x: logits, dx })
    }

    /// Back-propagates from the scalar `out`; gradients accumulate on leaves.
    pub fn backward(&mut self, out: Var) -> Result<(), TensorError> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: ov.shape().to_vec(),
            });
        }
        if !self.requires[out.0] {
            return Ok(());
        }
        let seed = Tensor::ones(ov.shape());
        self.accumulate(out, seed);
        for i in (0..=out.0).rev() {
            if !self.requires[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (v, contribution) in self.op_backward(i, &g)? {
                if self.requires[v.0] {
                    self.accumulate(v, contribution);
                }
            }
        }
        for i in 0..=out.0 {
            if let Some(g) = &self.grads[i] {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn op_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, TensorError> {
        let mut out = Vec::new();
        let wants = |v: &Var| self.requires[v.0];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d { x, k, stride, padding } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                let [_, _, h, w] = xv.dims4("conv2d")?;
                let [_, _, kh, kw] = kv.dims4("conv2d")?;
                if wants(x) {
                    out.push((*x, kernels::conv2d_input_grad(g, kv, (h, w), *stride, *padding, None)?));
                }
                if wants(k) {
                    out.push((*k, kernels::conv2d_weight_grad(xv, g, (kh, kw), *stride, *padding)?));
                }
            }
            Op::ConvTranspose2d { x, k, stride, padding } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                let [_, _, kh, kw] = kv.dims4("conv_transpose2d")?;
                if wants(x) {
                    out.push((*x, kernels::conv2d(g, kv, *stride, *padding, None)?));
                }
                if wants(k) {
                    out.push((*k, kernels::conv2d_weight_grad(g, xv, (kh, kw), *stride, *padding)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [b, c, h, w] = self.value(*x).dims4("batch_norm")?;
                let plane = h * w;
                let n = (b * plane) as f64;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                    for bi in 0..b {
                        let off = (bi * c + ch) * plane;
                        for j in off..off + plane {
                            sg += gd[j].as_f64();
                            sgx += (gd[j] * xhat[j]).as_f64();
                        }
                    }
                    dgamma[ch] = T::lit(sgx);
                    dbeta[ch] = T::lit(sg);
                }
                if wants(x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            if *batch_stats {
                                let mg = T::lit(dbeta[ch].as_f64() / n);
                                let mgx = T::lit(dgamma[ch].as_f64() / n);
                                for j in off..off + plane {
                                    dx[j] = scale * (gd[j] - mg - xhat[j] * mgx);
                                }
                            } else {
                                for j in off..off + plane {
                                    dx[j] = scale * gd[j];
                                }
                            }
                        }
                    }
                    out.push((*x, Tensor::new(g.shape(), dx)?));
                }
                if wants(gamma) {
                    out.push((*gamma, Tensor::new(self.value(*gamma).shape(), dgamma)?));
                }
                if wants(beta) {
                    out.push((*beta, Tensor::new(self.value(*beta).shape(), dbeta)?));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(g.shape(), dx)?));
            }
            Op::Scale { x, factor } => {
                let dx = g.data().iter().zip(factor).map(|(&gv, &f)| gv * f).collect();
                out.push((*x, Tensor::new(g.shape(), dx)?));
            }
            Op::Softmax { x } => {
                let y = &self.values[i];
                let [b, c, h, w] = y.dims4("softmax_channels")?;
                let plane = h * w;
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); yd.len()];
                for bi in 0..b {
                    for p in 0..plane {
                        let at = |ch: usize| (bi * c + ch) * plane + p;
                        let dotp = (0..c).fold(T::zero(), |acc, ch| acc + gd[at(ch)] * yd[at(ch)]);
                        for ch in 0..c {
                            dx[at(ch)] = yd[at(ch)] * (gd[at(ch)] - dotp);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), dx)?));
            }
            Op::Add { a, b } => {
                if wants(a) {
                    out.push((*a, g.clone()));
                }
                if wants(b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&gv, &q)| gv * q).collect();
                    out.push((*a, Tensor::new(g.shape(), d)?));
                }
                if wants(b) {
                    let d = g.data().iter().zip(av.data()).map(|(&gv, &p)| gv * p).collect();
                    out.push((*b, Tensor::new(g.shape(), d)?));
                }
            }
            Op::ChannelBias { x, bias } => {
                if wants(x) {
                    out.push((*x, g.clone()));
                }
                if wants(bias) {
                    let [_, c, h, w] = g.dims4("add_channel_bias")?;
                    let mut db = vec![T::zero(); c];
                    for (j, chunk) in g.data().chunks(h * w).enumerate() {
                        db[j % c] += chunk.iter().fold(T::zero(), |acc, &v| acc + v);
                    }
                    out.push((*bias, Tensor::new(self.value(*bias).shape(), db)?));
                }
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(self.value(*x).shape(), g.data()[0])));
            }
            Op::Loss { x, dx } => {
                let g0 = g.data()[0];
                let d = dx.iter().map(|&v| v * g0).collect();
                out.push((*x, Tensor::new(self.value(*x).shape(), d)?));
            }
        }
        Ok(out)
    }
}

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_loss_inputs<T: Float>(
    op: &'static str,
    x: &Tensor<T>,
    target: &[u8],
    weights: &[f64],
    mask: Option<&[bool]>,
) -> Result<([usize; 4], usize), TensorError> {
    let dims @ [b, c, h, w] = x.dims4(op)?;
    let pixels = b * h * w;
    if target.len() != pixels {
        return Err(TensorError::DimensionMismatch {
            op,
            axis: "target_pixels",
            left: pixels,
            right: target.len(),
        });
    }
    if weights.len() != c {
        return Err(TensorError::DimensionMismatch {
            op,
            axis: "class_weights",
            left: c,
            right: weights.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != pixels {
            return Err(TensorError::DimensionMismatch {
                op,
                axis: "mask_pixels",
                left: pixels,
                right: m.len(),
            });
        }
    }
    if let Some((index, &label)) = target.iter().enumerate().find(|(_, &l)| l as usize >= c) {
        return Err(TensorError::Label {
            op,
            label,
            index,
            classes: c,
        });
    }
    let count = mask.map_or(pixels, |m| m.iter().filter(|&&v| v).count());
    if count == 0 {
        return Err(TensorError::EmptyLoss { op });
    }
    Ok((dims, count))
}

/// Channel softmax on a plain tensor.
pub fn softmax_channels<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "softmax_channels";
    let [b, c, h, w] = x.dims4(OP)?;
    if c < 2 {
        return Err(TensorError::InvalidGeometry {
            op: OP,
            reason: format!("softmax needs at least 2 channels, got {c}"),
        });
    }
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(xd[base + ch * plane + p]);
            }
            let mut denom = T::zero();
            for ch in 0..c {
                let e = (xd[base + ch * plane + p] - max).exp();
                out[base + ch * plane + p] = e;
                denom += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] = out[base + ch * plane + p] / denom;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[4], &[-1.0, -2.0, -0.5, -3.0]));
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_identities_and_linearity() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s), g.value(a));
        let neg = g.constant(t(&[2, 2], &[-1.0, 2.0, -3.5, -0.25]));
        let zero = g.add(a, neg).unwrap();
        assert!(g.value(zero).data().iter().all(|&v| v == 0.0));
        let total = g.sum(zero).unwrap();
        g.backward(total).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn gradient_accumulates_over_consumers() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2]));
        let b = g.add(a, a).unwrap();
        assert!(!g.requires_grad(b));
        let s = g.sum(b).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn softmax_uniform_and_sigmoid_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let y = g.softmax_channels(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));

        let c = 3f64.ln();
        let x = g.constant(t(&[1, 2, 1, 2], &[0.3, -1.0, 0.3 + c, -1.0 + c]));
        let y = g.softmax_channels(x).unwrap();
        let d = g.value(y).data();
        assert!((d[2] - 0.75).abs() < 1e-12);
        assert!((d[3] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_needs_two_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.softmax_channels(x).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_bad_p() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        assert_eq!(g.dropout(x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(g.dropout(x, 0.4, Mode::Infer, 1).unwrap(), x);
        assert!(g.dropout(x, 1.0, Mode::Train, 1).is_err());
        assert!(g.dropout(x, -0.1, Mode::Train, 1).is_err());
    }

    #[test]
    fn dropout_mask_reproducible() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 16, 16]));
        let a = g.dropout(x, 0.4, Mode::Train, 7).unwrap();
        let b = g.dropout(x, 0.4, Mode::Train, 7).unwrap();
        let c = g.dropout(x, 0.4, Mode::Train, 8).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
    }

    #[test]
    fn uniform_prediction_costs_ln2() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[1, 2, 3, 3], 0.5));
        let target = [0, 1, 1, 0, 0, 1, 0, 1, 1];
        let loss = g.weighted_cross_entropy(p, &target, &[1.0, 1.0], None).unwrap();
        assert!((g.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn near_perfect_prediction_has_near_zero_loss() {
        let mut g = Graph::new();
        let target = [0u8, 1, 1, 0];
        let mut data = vec![0.0; 8];
        for (p, &y) in target.iter().enumerate() {
            data[y as usize * 4 + p] = 1.0 - 1e-12;
            data[(1 - y as usize) * 4 + p] = 1e-12;
        }
        let p = g.constant(t(&[1, 2, 2, 2], &data));
        let loss = g.weighted_cross_entropy(p, &target, &[1.0, 1.0], None).unwrap();
        assert!(g.value(loss).data()[0] <= 1e-11);
    }

    #[test]
    fn loss_errors() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::full(&[1, 2, 1, 2], 0.5));
        assert!(matches!(
            g.weighted_cross_entropy(p, &[0, 2], &[1.0, 1.0], None),
            Err(TensorError::Label { label: 2, .. })
        ));
        assert!(matches!(
            g.weighted_cross_entropy(p, &[0, 1], &[1.0, 1.0], Some(&[false, false])),
            Err(TensorError::EmptyLoss { .. })
        ));
        assert!(matches!(
            g.softmax_cross_entropy(p, &[0, 1], &[1.0, 1.0], Some(&[false, false])),
            Err(TensorError::EmptyLoss { .. })
        ));
    }

    #[test]
    fn fused_loss_matches_composed() {
        let logits = t(&[1, 2, 2, 2], &[0.3, -1.2, 2.0, 0.0, -0.4, 0.8, 1.5, 0.0]);
        let target = [1u8, 0, 0, 1];
        let weights = [0.6, 4.0];
        let mask = [true, true, false, true];
        let mut g = Graph::new();
        let z = g.param(logits.clone());
        let p = g.softmax_channels(z).unwrap();
        let a = g.weighted_cross_entropy(p, &target, &weights, Some(&mask)).unwrap();
        g.backward(a).unwrap();
        let composed = (g.value(a).data()[0], g.grad(z).unwrap().clone());

        let mut g = Graph::new();
        let z = g.param(logits);
        let b = g.softmax_cross_entropy(z, &target, &weights, Some(&mask)).unwrap();
        g.backward(b).unwrap();
        assert!((g.value(b).data()[0] - composed.0).abs() < 1e-14);
        assert!(g.grad(z).unwrap().max_abs_diff(&composed.1) < 1e-14);
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let mut g = Graph::new();
        let mut data = vec![0.0; 2 * 2 * 3 * 3];
        for (i, v) in data.iter_mut().enumerate() {
            *v = if (i / 9) % 2 == 0 { 4.0 } else { -1.5 };
        }
        let x = g.constant(t(&[2, 2, 3, 3], &data));
        let gamma = g.constant(t(&[2], &[2.0, 3.0]));
        let beta = g.constant(t(&[2], &[0.25, -0.75]));
        let mut stats = BatchNormStats::new(2);
        let y = g.batch_norm(x, gamma, beta, &mut stats, Mode::Train, 1e-5, 0.1).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let expected = if (i / 9) % 2 == 0 { 0.25 } else { -0.75 };
            assert_eq!(v, expected);
        }
        assert!((stats.mean[0] - 0.4).abs() < 1e-12);
        assert!((stats.mean[1] + 0.15).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_degenerate_batch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 1, 1]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let mut stats = BatchNormStats::new(2);
        assert_eq!(
            g.batch_norm(x, gamma, beta, &mut stats, Mode::Train, 1e-5, 0.1),
            Err(TensorError::DegenerateBatch)
        );
        assert!(g.batch_norm(x, gamma, beta, &mut stats, Mode::Infer, 1e-5, 0.1).is_ok());
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, f64::INFINITY]));
        let y = g.constant(t(&[2], &[1.0, f64::NEG_INFINITY]));
        assert_eq!(g.add(x, y), Err(TensorError::NonFinite { op: "add" }));
    }
}
