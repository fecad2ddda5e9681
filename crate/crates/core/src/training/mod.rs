//! Class weighting, Adam and the training loop.

mod adam;
mod trainer;
mod weights;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use trainer::{load_checkpoint, save_checkpoint, train, Checkpoint, Progress, Trainer};
pub use weights::{median_frequency_weights, ClassFrequencies, ClassWeights};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("class {class} never occurs in the training labels")]
    MissingClass { class: usize },
    #[error("non-finite gradient for {parameter} at step {step}")]
    NonFiniteGradient { parameter: String, step: u64 },
    #[error("gradient for {parameter} is missing or has the wrong shape")]
    GradientShape { parameter: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplicative learning-rate decay per epoch; constant when `None`.
    pub lr_decay: Option<f64>,
    /// Write a checkpoint every this many steps, if set.
    pub checkpoint_interval: Option<u64>,
    /// Train on random `height×width` crops instead of whole images.
    pub patch: Option<(usize, usize)>,
    /// Batches loaded ahead of the optimizer.
    pub prefetch: usize,
    /// Caps the prefetch queue at one batch. Sample order, dropout masks and
    /// patch positions are seed-derived either way.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            epochs: 10,
            max_steps: None,
            batch_size: 4,
            seed: 0,
            lr_decay: None,
            checkpoint_interval: None,
            patch: None,
            prefetch: 2,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam.epsilon > 0.0) {
            return bad(format!("adam epsilon must be positive, got {}", self.adam.epsilon));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1".into());
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("lr decay must lie in (0, 1], got {d}"));
            }
        }
        if self.checkpoint_interval == Some(0) {
            return bad("checkpoint interval must be at least 1".into());
        }
        if let Some((h, w)) = self.patch {
            if h == 0 || w == 0 {
                return bad(format!("patch size {h}x{w} is empty"));
            }
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    match config.lr_decay {
        Some(d) => config.learning_rate * d.powi(epoch as i32),
        None => config.learning_rate,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Wall-clock seconds since the run started.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,step,loss,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:e},{:e},{:.3}", r.epoch, r.step, r.loss, r.lr, r.seconds);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}
