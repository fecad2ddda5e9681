//! Multi-kernel image segmentation network built on a small reverse-mode
//! autodiff core.
//!
//! - [`tensor`]: dense tensors, convolution kernels and the gradient tape.
//! - [`model`]: architecture assembly, complexity accounting and model files.
//! - [`training`]: class weighting, Adam and the training loop.
//! - [`data`]: manifests, image decoding and augmentation.
//! - [`eval`]: confusion counts, metrics, ROC-AUC and accuracy maps.

pub mod checks;
pub mod data;
pub mod eval;
pub mod kv;
pub mod model;
pub mod tensor;
pub mod training;

pub use data::{DataError, Sample, SampleSource};
pub use model::{Model, ModelConfig, ModelError};
pub use tensor::{DType, Float, Graph, Mode, Tensor, TensorError, Var};
pub use training::{ClassWeights, TrainConfig, TrainError, TrainLog};
