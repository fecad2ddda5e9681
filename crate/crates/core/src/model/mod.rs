//! Network assembly, complexity accounting and model files.
//!
//! Topology for the default [`ModelConfig`]:
//!
//! ```text
//! input ─┬ conv3  → BN ┐
//!        ├ conv5  → BN ┤
//!        ├ conv7  → BN ┼─ Σ → ReLU
//!        └ conv11 → BN ┘
//! block i (×6): conv3 → BN, conv5 → BN, Σ, ReLU   (stride 2 in blocks 2, 4)
//! output: dropout → [convT 4×4/2 → BN → ReLU] ×2 → conv1×1 + bias → softmax
//! ```
//!
//! Convolutions feeding a batch norm carry no bias.

mod complexity;
mod config;
mod exec;
pub(crate) mod io;

use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kv::KvError;
use crate::tensor::{BatchNormStats, Float, Graph, Mode, Tensor, TensorError, Var};

pub use complexity::{
    complexity_report, count_madds, count_parameters, receptive_field, ComplexityReport, MaddsReport,
    ReceptiveFieldReport,
};
pub use config::ModelConfig;
pub use io::{
    decode_model, decode_tensors, encode_model, encode_tensors, load_model, read_model_file, save_model, serialized_size, ModelFile,
    Section, FORMAT_VERSION, MAGIC,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigSyntax(#[from] KvError),
    #[error("input {height}x{width} is not divisible by {multiple}; pad the input first")]
    Geometry {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("input has {got} channels, model expects {expected}")]
    Channels { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch in tensor {tensor:?}")]
    Checksum { tensor: String },
    #[error("model file truncated while reading {what}")]
    Truncated { what: String },
    #[error("malformed model file: {0}")]
    Malformed(String),
}

/// Parameter handles of a model bound to a [`Graph`].
pub type ParamVars = IndexMap<String, Var>;

/// Instantiated network: named parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Float> {
    config: ModelConfig,
    params: IndexMap<String, Tensor<T>>,
    bn_stats: IndexMap<String, BatchNormStats<T>>,
}

/// Name prefixes of the convolution branches of the input block.
pub(crate) fn input_branch(k: usize) -> String {
    format!("input.k{k}")
}

pub(crate) fn block_branch(block: usize, k: usize) -> String {
    format!("block{block}.k{k}")
}

pub(crate) fn decoder_stage(stage: usize) -> String {
    format!("decoder{stage}")
}

impl<T: Float> Model<T> {
    /// Builds the network with fan-in scaled uniform (He) initialisation drawn
    /// from `seed`; batch-norm gamma is 1 and beta 0.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        let mut bn_stats = IndexMap::new();
        let width = config.width;
        let mut conv_bn = |prefix: String, shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / fan_in as f64).sqrt();
            params.insert(format!("{prefix}.weight"), Tensor::uniform(&shape, -bound, bound, rng));
            params.insert(format!("{prefix}.bn.gamma"), Tensor::ones(&[width]));
            params.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[width]));
            bn_stats.insert(format!("{prefix}.bn"), BatchNormStats::new(width));
        };
        for &k in &config.input_kernels {
            let fan_in = config.in_channels * k * k;
            conv_bn(input_branch(k), [width, config.in_channels, k, k], fan_in, &mut rng);
        }
        for block in 1..=config.num_blocks {
            for &k in &config.block_kernels {
                conv_bn(block_branch(block, k), [width, width, k, k], width * k * k, &mut rng);
            }
        }
        let dk = config.decoder_kernel;
        for stage in 1..=config.decoder_stages {
            // Each output pixel of a stride-2 transposed conv sees (dk/2)² taps per channel.
            let fan_in = width * (dk / 2) * (dk / 2);
            conv_bn(decoder_stage(stage), [width, width, dk, dk], fan_in, &mut rng);
        }
        let bound = 1.0 / (width as f64).sqrt();
        params.insert(
            "classifier.weight".into(),
            Tensor::uniform(&[config.num_classes, width, 1, 1], -bound, bound, &mut rng),
        );
        params.insert("classifier.bias".into(), Tensor::zeros(&[config.num_classes]));
        Ok(Model {
            config,
            params,
            bn_stats,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: IndexMap<String, Tensor<T>>,
        bn_stats: IndexMap<String, BatchNormStats<T>>,
    ) -> Self {
        Model {
            config,
            params,
            bn_stats,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &IndexMap<String, BatchNormStats<T>> {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut IndexMap<String, BatchNormStats<T>> {
        &mut self.bn_stats
    }

    /// Trainable element count of the instantiated parameters.
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Same network at another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BatchNormStats {
                            mean: s.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                            var: s.var.iter().map(|v| U::lit(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Adds every parameter to `graph`, as gradient leaves when `trainable`.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> ParamVars {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let [_, c, h, w] = match shape {
            &[b, c, h, w] => [b, c, h, w],
            _ => {
                return Err(TensorError::Rank {
                    op: "forward",
                    expected: 4,
                    shape: shape.to_vec(),
                }
                .into())
            }
        };
        if c != self.config.in_channels {
            return Err(ModelError::Channels {
                expected: self.config.in_channels,
                got: c,
            });
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(ModelError::Geometry {
                height: h,
                width: w,
                multiple: m,
            });
        }
        Ok(())
    }

    /// Records the network on `graph` and returns the pre-softmax logits.
    ///
    /// In [`Mode::Train`] batch statistics normalise activations and update
    /// the running statistics; dropout draws its mask from `dropout_seed`.
    pub fn forward_logits(
        &mut self,
        graph: &mut Graph<T>,
        vars: &ParamVars,
        input: Var,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<Var, ModelError> {
        Ok(self.forward_stages(graph, vars, input, mode, dropout_seed)?.logits)
    }

    /// Like [`Model::forward_logits`], also returning the encoder output.
    pub fn forward_stages(
        &mut self,
        graph: &mut Graph<T>,
        vars: &ParamVars,
        input: Var,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<Stages<Var>, ModelError> {
        self.check_input(graph.value(input).shape())?;
        let mut exec = exec::GraphExec {
            graph,
            vars,
            stats: &mut self.bn_stats,
            mode,
            epsilon: self.config.bn_epsilon,
            momentum: self.config.bn_momentum,
            dropout_p: self.config.dropout_p,
            dropout_seed,
        };
        exec::run(&self.config, &mut exec, input)
    }

    /// Per-pixel class probabilities `B×num_classes×H×W`.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<Tensor<T>, ModelError> {
        match mode {
            Mode::Infer => self.predict(batch),
            Mode::Train => {
                let mut g = Graph::new();
                let vars = self.bind(&mut g, false);
                let x = g.constant(batch.clone());
                let logits = self.forward_logits(&mut g, &vars, x, mode, dropout_seed)?;
                let probs = g.softmax_channels(logits)?;
                Ok(g.value(probs).clone())
            }
        }
    }

    /// Inference-mode probabilities without recording a tape; intermediate
    /// activations are released as soon as they are consumed.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let logits = self.predict_logits(batch, None)?;
        Ok(crate::tensor::softmax_channels(&logits)?)
    }

    fn predict_logits(&self, batch: &Tensor<T>, tally: Option<&AtomicU64>) -> Result<Tensor<T>, ModelError> {
        self.check_input(batch.shape())?;
        let mut exec = exec::EagerExec { model: self, tally };
        Ok(exec::run(&self.config, &mut exec, batch.clone())?.logits)
    }

    /// Runs an inference pass on a zero image of the given size while the
    /// convolution kernels tally their multiply-adds.
    pub fn instrumented_madds(&self, height: usize, width: usize) -> Result<u64, ModelError> {
        let tally = AtomicU64::new(0);
        let input = Tensor::zeros(&[1, self.config.in_channels, height, width]);
        self.predict_logits(&input, Some(&tally))?;
        Ok(tally.load(Ordering::Relaxed))
    }
}

/// Outputs of interest from one forward pass.
#[derive(Debug, Clone)]
pub struct Stages<V> {
    /// Output of the last multi-kernel block.
    pub encoder: V,
    pub logits: V,
}

/// Class index with the highest probability at each pixel of a `B×C×H×W`
/// tensor, as `B×H×W` labels. Ties resolve to the lower class index.
pub fn argmax_channels<T: Float>(probs: &Tensor<T>) -> Result<Vec<u8>, TensorError> {
    let [b, c, h, w] = probs.dims4("argmax_channels")?;
    let plane = h * w;
    let d = probs.data();
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if d[(bi * c + ch) * plane + p] > d[(bi * c + best) * plane + p] {
                    best = ch;
                }
            }
            out[bi * plane + p] = best as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_forward_shape_and_distribution() {
        let model = Model::<f32>::build(ModelConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
        let p = model.predict(&x).unwrap();
        assert_eq!(p.shape(), &[1, 2, 64, 64]);
        let plane = 64 * 64;
        for i in 0..plane {
            let s = p.data()[i] + p.data()[plane + i];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_seeds_build_identical_models() {
        let a = Model::<f32>::build(ModelConfig::default(), 11).unwrap();
        let b = Model::<f32>::build(ModelConfig::default(), 11).unwrap();
        let c = Model::<f32>::build(ModelConfig::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn indivisible_input_is_a_geometry_error() {
        let model = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 30, 32]);
        assert!(matches!(
            model.predict(&x),
            Err(ModelError::Geometry { height: 30, multiple: 4, .. })
        ));
        let x = Tensor::zeros(&[1, 1, 32, 32]);
        assert!(matches!(model.predict(&x), Err(ModelError::Channels { .. })));
    }

    #[test]
    fn infer_is_repeatable_and_matches_graph_path() {
        let mut model = Model::<f64>::build(ModelConfig { width: 4, ..Default::default() }, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 3, 16, 12], 0.0, 1.0, &mut rng);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a, b);
        let before = model.clone();
        let c = model.forward(&x, Mode::Infer, 0).unwrap();
        assert_eq!(a, c);
        assert_eq!(model, before);

        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let xv = g.constant(x);
        let logits = model.forward_logits(&mut g, &vars, xv, Mode::Infer, 0).unwrap();
        let p = g.softmax_channels(logits).unwrap();
        assert!(g.value(p).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut model = Model::<f32>::build(ModelConfig { width: 4, ..Default::default() }, 5).unwrap();
        let x = Tensor::from_fn(&[1, 3, 8, 8], |i| (i % 7) as f32 * 0.1);
        let before = model.bn_stats()["input.k3.bn"].clone();
        model.forward(&x, Mode::Train, 1).unwrap();
        assert_ne!(model.bn_stats()["input.k3.bn"], before);
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let p = Tensor::<f32>::new(&[1, 2, 1, 3], vec![0.7, 0.5, 0.2, 0.3, 0.5, 0.8]).unwrap();
        assert_eq!(argmax_channels(&p).unwrap(), vec![0, 0, 1]);
    }
}
