use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adam_step, lr_schedule, AdamState, ClassWeights, StepRecord, TrainConfig, TrainError, TrainLog};
use crate::data::{stack, DataError, Sample, SampleSource};
use crate::model::io::{write_file, Reader};
use crate::model::{decode_model, decode_tensors, encode_model, encode_tensors, Model, Section};
use crate::tensor::{Float, Graph, Mode, Tensor, TensorError};

const ADAM_TAG: [u8; 4] = *b"ADAM";
const PROGRESS_TAG: [u8; 4] = *b"PROG";

/// Position of the next batch to train on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Progress {
    pub epoch: usize,
    /// Batches already consumed in `epoch`.
    pub batch: usize,
    /// Optimizer steps taken so far.
    pub global_step: u64,
}

/// Model, optimizer state and progress; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Float> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub progress: Progress,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e5ad);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64)));
    order
}

fn crop(sample: &Sample, (ph, pw): (usize, usize), rng: &mut ChaCha8Rng) -> Result<Sample, DataError> {
    let (h, w, c) = (sample.height(), sample.width(), sample.channels());
    if ph > h || pw > w {
        return Err(DataError::InvalidSample {
            id: sample.id().to_string(),
            message: format!("{h}x{w} is smaller than the {ph}x{pw} patch"),
        });
    }
    let mut last = None;
    // prefer windows with at least one counted pixel
    for _ in 0..16 {
        let y0 = rng.random_range(0..=h - ph);
        let x0 = rng.random_range(0..=w - pw);
        let rows = y0..y0 + ph;
        let pixel = |y: usize, x: usize| y * w + x;
        let mut image = Vec::with_capacity(ph * pw * c);
        let mut label = Vec::with_capacity(ph * pw);
        let mut mask = sample.fov_mask().map(|_| Vec::with_capacity(ph * pw));
        for y in rows {
            let a = pixel(y, x0);
            image.extend_from_slice(&sample.image()[a * c..(a + pw) * c]);
            label.extend_from_slice(&sample.label()[a..a + pw]);
            if let (Some(out), Some(m)) = (mask.as_mut(), sample.fov_mask()) {
                out.extend_from_slice(&m[a..a + pw]);
            }
        }
        let any = mask.as_ref().map_or(true, |m| m.iter().any(|&v| v));
        let s = Sample::new(sample.id(), (ph, pw, c), image, label, mask)?;
        if any {
            return Ok(s);
        }
        last = Some(s);
    }
    Ok(last.expect("at least one attempt"))
}

/// Runs the optimisation loop on a model.
pub struct Trainer<'m, T: Float> {
    model: &'m mut Model<T>,
    adam: AdamState<T>,
    progress: Progress,
}

impl<'m, T: Float> Trainer<'m, T> {
    pub fn new(model: &'m mut Model<T>) -> Self {
        let adam = AdamState::new(model.params());
        Trainer {
            model,
            adam,
            progress: Progress::default(),
        }
    }

    /// Continues from a checkpoint; `model` is overwritten with its contents.
    pub fn resume(model: &'m mut Model<T>, checkpoint: Checkpoint<T>) -> Self {
        *model = checkpoint.model;
        Trainer {
            model,
            adam: checkpoint.adam,
            progress: checkpoint.progress,
        }
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn model(&self) -> &Model<T> {
        self.model
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        save_checkpoint(path, self.model, &self.adam, self.progress)
    }

    /// Trains until `config.epochs` or `config.max_steps` is reached.
    ///
    /// Shuffling, dropout masks and patch positions derive from `config.seed`
    /// and the step position alone, so a resumed run follows the same
    /// trajectory as an uninterrupted one. When `checkpoint` is given it is
    /// written every `checkpoint_interval` steps and at the end; a failed run
    /// leaves the last good checkpoint in place.
    pub fn run<S: SampleSource + ?Sized>(
        &mut self,
        data: &S,
        config: &TrainConfig,
        weights: &ClassWeights,
        checkpoint: Option<&Path>,
    ) -> Result<TrainLog, TrainError> {
        config.validate()?;
        let classes = self.model.config().num_classes;
        if weights.len() != classes {
            return Err(TrainError::Config(format!(
                "{} class weights for a {classes}-class model",
                weights.len()
            )));
        }
        if data.is_empty() {
            return Err(DataError::Empty.into());
        }
        let start = Instant::now();
        let mut log = TrainLog::default();
        let batches = data.len().div_ceil(config.batch_size);
        let queue = if config.deterministic { 1 } else { config.prefetch.max(1) };
        let done = |p: &Progress| p.epoch >= config.epochs || config.max_steps.is_some_and(|m| p.global_step >= m);

        while !done(&self.progress) {
            let epoch = self.progress.epoch;
            let order = epoch_order(data.len(), config.seed, epoch);
            let lr = lr_schedule(config, epoch);
            let first = self.progress.batch;
            let finished = std::thread::scope(|scope| -> Result<bool, TrainError> {
                let (tx, rx) = mpsc::sync_channel::<Result<Vec<Sample>, DataError>>(queue);
                let order = &order;
                let step0 = self.progress.global_step;
                scope.spawn(move || {
                    for (k, chunk) in order.chunks(config.batch_size).enumerate().skip(first) {
                        let step = step0 + (k - first) as u64;
                        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0x5eed, step));
                        let batch = chunk
                            .iter()
                            .map(|&i| {
                                let s = data.get(i)?;
                                match config.patch {
                                    Some(p) => crop(&s, p, &mut rng),
                                    None => Ok(s),
                                }
                            })
                            .collect();
                        if tx.send(batch).is_err() {
                            break;
                        }
                    }
                });
                for samples in rx.iter() {
                    let loss = self.step(&samples?, weights, lr, config)?;
                    self.progress.batch += 1;
                    self.progress.global_step += 1;
                    log.records.push(StepRecord {
                        epoch,
                        step: self.progress.global_step,
                        loss,
                        lr,
                        seconds: start.elapsed().as_secs_f64(),
                    });
                    if self.progress.batch == batches {
                        self.progress.epoch += 1;
                        self.progress.batch = 0;
                    }
                    if let (Some(path), Some(every)) = (checkpoint, config.checkpoint_interval) {
                        if self.progress.global_step % every == 0 {
                            self.save_checkpoint(path)?;
                        }
                    }
                    if done(&self.progress) {
                        return Ok(false);
                    }
                }
                Ok(true)
            })?;
            if !finished {
                break;
            }
        }
        if let Some(path) = checkpoint {
            self.save_checkpoint(path)?;
        }
        Ok(log)
    }

    fn step(&mut self, samples: &[Sample], weights: &ClassWeights, lr: f64, config: &TrainConfig) -> Result<f64, TrainError> {
        let step = self.progress.global_step + 1;
        let non_finite = |e: TensorError| match e {
            TensorError::NonFinite { .. } => TrainError::NonFiniteLoss {
                epoch: self.progress.epoch,
                step,
            },
            other => other.into(),
        };
        let batch = stack::<T>(samples)?;
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, true);
        let x = g.constant(batch.images);
        let logits = self
            .model
            .forward_logits(&mut g, &vars, x, Mode::Train, mix(config.seed, step))
            .map_err(|e| match e {
                crate::model::ModelError::Tensor(t) => non_finite(t),
                other => other.into(),
            })?;
        let loss = g
            .softmax_cross_entropy(logits, &batch.labels, weights.as_slice(), batch.mask.as_deref())
            .map_err(non_finite)?;
        let value = g.value(loss).data()[0].as_f64();
        g.backward(loss).map_err(non_finite)?;
        let grads: IndexMap<String, Tensor<T>> = vars
            .iter()
            .map(|(name, &v)| {
                let grad = g
                    .take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.model.params()[name].shape()));
                (name.clone(), grad)
            })
            .collect();
        adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, &config.adam)?;
        Ok(value)
    }
}

/// Trains `model` from scratch without checkpointing.
pub fn train<T: Float, S: SampleSource + ?Sized>(
    model: &mut Model<T>,
    data: &S,
    config: &TrainConfig,
    weights: &ClassWeights,
) -> Result<TrainLog, TrainError> {
    Trainer::new(model).run(data, config, weights, None)
}

pub fn save_checkpoint<T: Float>(
    path: &Path,
    model: &Model<T>,
    adam: &AdamState<T>,
    progress: Progress,
) -> Result<(), TrainError> {
    let mut adam_payload = adam.t.to_le_bytes().to_vec();
    let m_names: Vec<String> = adam.m.keys().map(|k| format!("m.{k}")).collect();
    let v_names: Vec<String> = adam.v.keys().map(|k| format!("v.{k}")).collect();
    adam_payload.extend(encode_tensors(
        m_names
            .iter()
            .map(String::as_str)
            .zip(adam.m.values())
            .chain(v_names.iter().map(String::as_str).zip(adam.v.values())),
    ));
    let mut prog = Vec::with_capacity(24);
    for v in [progress.epoch as u64, progress.batch as u64, progress.global_step] {
        prog.extend_from_slice(&v.to_le_bytes());
    }
    let sections = [
        Section {
            tag: ADAM_TAG,
            payload: adam_payload,
        },
        Section {
            tag: PROGRESS_TAG,
            payload: prog,
        },
    ];
    Ok(write_file(path, &encode_model(model, &sections))?)
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>, TrainError> {
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file = decode_model::<T>(&bytes)?;
    let section = |tag: [u8; 4]| {
        file.sections
            .iter()
            .find(|s| s.tag == tag)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing {} section", String::from_utf8_lossy(&tag))))
    };
    let adam_bytes = &section(ADAM_TAG)?.payload;
    let mut r = Reader::new(adam_bytes);
    let t = r.u64("adam step")?;
    let mut tensors = decode_tensors::<T>(&adam_bytes[8..])?;
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    for (name, p) in file.model.params() {
        for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
            let t = tensors
                .shift_remove(&format!("{prefix}.{name}"))
                .ok_or_else(|| TrainError::Checkpoint(format!("missing {prefix} moment for {name}")))?;
            if t.shape() != p.shape() {
                return Err(TrainError::Checkpoint(format!("{prefix} moment for {name} has the wrong shape")));
            }
            dst.insert(name.clone(), t);
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(TrainError::Checkpoint(format!("unexpected optimizer tensor {extra}")));
    }
    let mut r = Reader::new(&section(PROGRESS_TAG)?.payload);
    let progress = Progress {
        epoch: r.u64("epoch")? as usize,
        batch: r.u64("batch")? as usize,
        global_step: r.u64("global step")?,
    };
    Ok(Checkpoint {
        model: file.model,
        adam: AdamState { m, v, t },
        progress,
    })
}
