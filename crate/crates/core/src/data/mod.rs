//! Samples, dataset manifests, image decoding and augmentation.

mod augment;
mod geometry;
mod image_io;
mod manifest;

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{Float, Tensor};

pub use augment::{adjust_brightness, augment_training_set, rotate_sample, AugmentConfig, AugmentedSet};
pub use geometry::{pad_to_multiple, resize_sample, CropRecord, Padded};
pub use image_io::{
    binarize_label, decode_image, write_gray16_png, write_gray8_png, write_rgb_png, Image, LABEL_THRESHOLD,
};
pub use manifest::{load_manifest, split_records, DatasetManifest, ManifestSource, Record, ResizePolicy, Split};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unsupported image {path}: {message}")]
    Unsupported { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("{path}:{line}: record {id:?} references missing file {file}")]
    MissingFile {
        path: PathBuf,
        line: usize,
        id: String,
        file: PathBuf,
    },
    #[error("sample {id:?}: {message}")]
    InvalidSample { id: String, message: String },
    #[error("invalid gain range [{lo}, {hi}]")]
    GainRange { lo: f64, hi: f64 },
    #[error("brightness gain must be positive and finite, got {0}")]
    Gain(f64),
    #[error("dataset is empty")]
    Empty,
    #[error("sample index {index} out of range for {len} samples")]
    Index { index: usize, len: usize },
    #[error("sample {id:?}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<DataError>,
    },
}

/// One image with its binary label map and optional field-of-view mask.
///
/// The image is stored row-major `H×W×C` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    id: String,
    height: usize,
    width: usize,
    channels: usize,
    image: Vec<f32>,
    label: Vec<u8>,
    fov_mask: Option<Vec<bool>>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        (height, width, channels): (usize, usize, usize),
        image: Vec<f32>,
        label: Vec<u8>,
        fov_mask: Option<Vec<bool>>,
    ) -> Result<Self, DataError> {
        let id = id.into();
        let invalid = |message: String| DataError::InvalidSample { id: id.clone(), message };
        let pixels = height * width;
        if pixels == 0 || channels == 0 {
            return Err(invalid(format!("empty geometry {height}x{width}x{channels}")));
        }
        if image.len() != pixels * channels {
            return Err(invalid(format!(
                "image has {} values, expected {}",
                image.len(),
                pixels * channels
            )));
        }
        if label.len() != pixels {
            return Err(invalid(format!("label has {} pixels, expected {pixels}", label.len())));
        }
        if let Some(m) = &fov_mask {
            if m.len() != pixels {
                return Err(invalid(format!("mask has {} pixels, expected {pixels}", m.len())));
            }
        }
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("image value {v} outside [0, 1]")));
        }
        if let Some(v) = label.iter().find(|&&v| v > 1) {
            return Err(invalid(format!("label value {v} is not binary")));
        }
        Ok(Sample {
            id,
            height,
            width,
            channels,
            image,
            label,
            fov_mask,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image(&self) -> &[f32] {
        &self.image
    }

    pub fn label(&self) -> &[u8] {
        &self.label
    }

    pub fn fov_mask(&self) -> Option<&[bool]> {
        self.fov_mask.as_deref()
    }

    /// Whether pixel `i` counts towards losses and metrics.
    pub fn counted(&self, i: usize) -> bool {
        self.fov_mask.as_ref().map_or(true, |m| m[i])
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Image as a `1×C×H×W` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![T::zero(); c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                data[ch * h * w + p] = T::lit(self.image[p * c + ch] as f64);
            }
        }
        Tensor::new(&[1, c, h, w], data).expect("shape matches")
    }
}

/// Samples stacked into a batch.
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
    /// `None` when no sample in the batch carries a mask.
    pub mask: Option<Vec<bool>>,
}

/// Stacks equally-sized samples into a `B×C×H×W` batch.
pub fn stack<T: Float>(samples: &[Sample]) -> Result<Batch<T>, DataError> {
    let first = samples.first().ok_or(DataError::Empty)?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut images = Vec::with_capacity(samples.len() * c * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    let any_mask = samples.iter().any(|s| s.fov_mask.is_some());
    let mut mask = Vec::new();
    for s in samples {
        if (s.height, s.width, s.channels) != (h, w, c) {
            return Err(DataError::InvalidSample {
                id: s.id.clone(),
                message: format!(
                    "{}x{}x{} does not match batch geometry {h}x{w}x{c}",
                    s.height, s.width, s.channels
                ),
            });
        }
        images.extend(s.to_tensor::<T>().into_data());
        labels.extend_from_slice(&s.label);
        if any_mask {
            match &s.fov_mask {
                Some(m) => mask.extend_from_slice(m),
                None => mask.extend(std::iter::repeat(true).take(h * w)),
            }
        }
    }
    Ok(Batch {
        images: Tensor::new(&[samples.len(), c, h, w], images).expect("shape matches"),
        labels,
        mask: any_mask.then_some(mask),
    })
}

/// Random-access sample provider. Implementations may load lazily.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<Sample, DataError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn iter(&self) -> SourceIter<'_, Self>
    where
        Self: Sized,
    {
        SourceIter { source: self, next: 0 }
    }
}

pub struct SourceIter<'a, S> {
    source: &'a S,
    next: usize,
}

impl<S: SampleSource> Iterator for SourceIter<'_, S> {
    type Item = Result<Sample, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.source.len() {
            return None;
        }
        self.next += 1;
        Some(self.source.get(self.next - 1))
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Sample, DataError> {
        self.as_slice().get(index).cloned().ok_or(DataError::Index {
            index,
            len: self.as_slice().len(),
        })
    }
}

impl<S: SampleSource + ?Sized> SampleSource for &S {
    fn len(&self) -> usize {
        (**self).len()
    }

    fn get(&self, index: usize) -> Result<Sample, DataError> {
        (**self).get(index)
    }
}
