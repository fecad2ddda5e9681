//! One topology description, two executors: the gradient tape and an eager
//! inference path that frees activations as it goes.

use std::sync::atomic::AtomicU64;

use indexmap::IndexMap;

use super::{block_branch, decoder_stage, input_branch, Model, ModelConfig, ModelError, ParamVars, Stages};
use crate::tensor::{kernels, BatchNormStats, Float, Graph, Mode, Tensor, TensorError, Var};

pub(crate) trait Exec<T: Float> {
    type V: Clone;

    fn conv(&mut self, x: &Self::V, prefix: &str, stride: usize, padding: usize) -> Result<Self::V, ModelError>;
    fn conv_transpose(&mut self, x: &Self::V, prefix: &str, stride: usize, padding: usize)
        -> Result<Self::V, ModelError>;
    fn bn(&mut self, x: Self::V, prefix: &str) -> Result<Self::V, ModelError>;
    fn relu(&mut self, x: Self::V) -> Result<Self::V, ModelError>;
    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V, ModelError>;
    fn dropout(&mut self, x: Self::V) -> Result<Self::V, ModelError>;
    /// 1×1 convolution plus per-class bias.
    fn classifier(&mut self, x: &Self::V) -> Result<Self::V, ModelError>;
}

/// Parallel conv → BN branches summed element-wise, then one ReLU.
fn multi_kernel<T: Float, E: Exec<T>>(
    exec: &mut E,
    x: &E::V,
    branches: impl Iterator<Item = (String, usize)>,
    stride: usize,
) -> Result<E::V, ModelError> {
    let mut acc: Option<E::V> = None;
    for (prefix, k) in branches {
        let y = exec.conv(x, &prefix, stride, (k - 1) / 2)?;
        let y = exec.bn(y, &prefix)?;
        acc = Some(match acc {
            None => y,
            Some(a) => exec.add(a, y)?,
        });
    }
    let fused = acc.ok_or_else(|| ModelError::Config("multi-kernel block without branches".into()))?;
    exec.relu(fused)
}

pub(crate) fn run<T: Float, E: Exec<T>>(
    config: &ModelConfig,
    exec: &mut E,
    input: E::V,
) -> Result<Stages<E::V>, ModelError> {
    let mut x = multi_kernel(
        exec,
        &input,
        config.input_kernels.iter().map(|&k| (input_branch(k), k)),
        1,
    )?;
    drop(input);
    for block in 1..=config.num_blocks {
        let stride = if config.is_strided(block) { 2 } else { 1 };
        x = multi_kernel(
            exec,
            &x,
            config.block_kernels.iter().map(|&k| (block_branch(block, k), k)),
            stride,
        )?;
    }
    let encoder = x.clone();
    x = exec.dropout(x)?;
    for stage in 1..=config.decoder_stages {
        let prefix = decoder_stage(stage);
        x = exec.conv_transpose(&x, &prefix, 2, config.decoder_padding())?;
        x = exec.bn(x, &prefix)?;
        x = exec.relu(x)?;
    }
    let logits = exec.classifier(&x)?;
    Ok(Stages { encoder, logits })
}

pub(crate) struct GraphExec<'a, T: Float> {
    pub graph: &'a mut Graph<T>,
    pub vars: &'a ParamVars,
    pub stats: &'a mut IndexMap<String, BatchNormStats<T>>,
    pub mode: Mode,
    pub epsilon: f64,
    pub momentum: f64,
    pub dropout_p: f64,
    pub dropout_seed: u64,
}

impl<T: Float> GraphExec<'_, T> {
    fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Malformed(format!("parameter {name:?} is not bound")))
    }
}

impl<T: Float> Exec<T> for GraphExec<'_, T> {
    type V = Var;

    fn conv(&mut self, x: &Var, prefix: &str, stride: usize, padding: usize) -> Result<Var, ModelError> {
        let k = self.var(&format!("{prefix}.weight"))?;
        Ok(self.graph.conv2d(*x, k, stride, padding)?)
    }

    fn conv_transpose(&mut self, x: &Var, prefix: &str, stride: usize, padding: usize) -> Result<Var, ModelError> {
        let k = self.var(&format!("{prefix}.weight"))?;
        Ok(self.graph.conv_transpose2d(*x, k, stride, padding)?)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let gamma = self.var(&format!("{prefix}.bn.gamma"))?;
        let beta = self.var(&format!("{prefix}.bn.beta"))?;
        let key = format!("{prefix}.bn");
        let stats = self
            .stats
            .get_mut(&key)
            .ok_or_else(|| ModelError::Malformed(format!("missing running stats {key:?}")))?;
        Ok(self
            .graph
            .batch_norm(x, gamma, beta, stats, self.mode, self.epsilon, self.momentum)?)
    }

    fn relu(&mut self, x: Var) -> Result<Var, ModelError> {
        Ok(self.graph.relu(x)?)
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var, ModelError> {
        Ok(self.graph.add(a, b)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        Ok(self.graph.dropout(x, self.dropout_p, self.mode, self.dropout_seed)?)
    }

    fn classifier(&mut self, x: &Var) -> Result<Var, ModelError> {
        let k = self.var("classifier.weight")?;
        let b = self.var("classifier.bias")?;
        let y = self.graph.conv2d(*x, k, 1, 0)?;
        Ok(self.graph.add_channel_bias(y, b)?)
    }
}

pub(crate) struct EagerExec<'a, T: Float> {
    pub model: &'a Model<T>,
    pub tally: Option<&'a AtomicU64>,
}

impl<T: Float> EagerExec<'_, T> {
    fn param(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.model
            .params
            .get(name)
            .ok_or_else(|| ModelError::Malformed(format!("missing parameter {name:?}")))
    }
}

impl<T: Float> Exec<T> for EagerExec<'_, T> {
    type V = Tensor<T>;

    fn conv(&mut self, x: &Tensor<T>, prefix: &str, stride: usize, padding: usize) -> Result<Tensor<T>, ModelError> {
        let k = self.param(&format!("{prefix}.weight"))?;
        Ok(kernels::conv2d(x, k, stride, padding, self.tally)?)
    }

    fn conv_transpose(
        &mut self,
        x: &Tensor<T>,
        prefix: &str,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>, ModelError> {
        let k = self.param(&format!("{prefix}.weight"))?;
        Ok(kernels::conv_transpose2d(x, k, stride, padding, self.tally)?)
    }

    fn bn(&mut self, mut x: Tensor<T>, prefix: &str) -> Result<Tensor<T>, ModelError> {
        let gamma = self.param(&format!("{prefix}.bn.gamma"))?.data();
        let beta = self.param(&format!("{prefix}.bn.beta"))?.data();
        let key = format!("{prefix}.bn");
        let stats = self
            .model
            .bn_stats
            .get(&key)
            .ok_or_else(|| ModelError::Malformed(format!("missing running stats {key:?}")))?;
        let [_, c, h, w] = x.dims4("batch_norm")?;
        let eps = self.model.config.bn_epsilon;
        let plane = h * w;
        for (i, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            let mean = stats.mean[ch];
            let inv_std = T::lit(1.0 / (stats.var[ch].as_f64() + eps).sqrt());
            for v in chunk {
                *v = gamma[ch] * ((*v - mean) * inv_std) + beta[ch];
            }
        }
        if !x.is_finite() {
            return Err(TensorError::NonFinite { op: "batch_norm" }.into());
        }
        Ok(x)
    }

    fn relu(&mut self, mut x: Tensor<T>) -> Result<Tensor<T>, ModelError> {
        x.data_mut().iter_mut().for_each(|v| {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        });
        Ok(x)
    }

    fn add(&mut self, mut a: Tensor<T>, b: Tensor<T>) -> Result<Tensor<T>, ModelError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            }
            .into());
        }
        a.data_mut().iter_mut().zip(b.data()).for_each(|(p, &q)| *p += q);
        Ok(a)
    }

    fn dropout(&mut self, x: Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(x)
    }

    fn classifier(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let k = self.param("classifier.weight")?;
        let bias = self.param("classifier.bias")?.data();
        let mut y = kernels::conv2d(x, k, 1, 0, self.tally)?;
        let [_, c, h, w] = y.dims4("classifier")?;
        for (i, chunk) in y.data_mut().chunks_mut(h * w).enumerate() {
            let b = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(y)
    }
}
