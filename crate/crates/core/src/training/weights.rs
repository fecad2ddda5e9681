use super::TrainError;
use crate::data::SampleSource;

/// Per-class loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, TrainError> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(TrainError::Config(format!(
                "class weights must be positive and finite, got {weights:?}"
            )));
        }
        Ok(ClassWeights(weights))
    }

    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights(vec![1.0; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Pixel counts for median-frequency balancing.
///
/// `freq_c` is the number of class-`c` pixels divided by the number of
/// counted pixels in the images where class `c` appears.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassFrequencies {
    class_pixels: Vec<u64>,
    present_pixels: Vec<u64>,
}

impl ClassFrequencies {
    pub fn new(num_classes: usize) -> Self {
        ClassFrequencies {
            class_pixels: vec![0; num_classes],
            present_pixels: vec![0; num_classes],
        }
    }

    /// Adds one label map; pixels outside `mask` are ignored.
    pub fn add(&mut self, label: &[u8], mask: Option<&[bool]>) -> Result<(), TrainError> {
        let classes = self.class_pixels.len();
        let mut counts = vec![0u64; classes];
        let mut counted = 0u64;
        for (i, &y) in label.iter().enumerate() {
            if !mask.map_or(true, |m| m[i]) {
                continue;
            }
            let y = y as usize;
            if y >= classes {
                return Err(TrainError::Config(format!("label {y} outside {classes} classes")));
            }
            counts[y] += 1;
            counted += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                self.class_pixels[c] += n;
                self.present_pixels[c] += counted;
            }
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Result<Vec<f64>, TrainError> {
        self.class_pixels
            .iter()
            .zip(&self.present_pixels)
            .enumerate()
            .map(|(class, (&n, &d))| {
                if n == 0 {
                    Err(TrainError::MissingClass { class })
                } else {
                    Ok(n as f64 / d as f64)
                }
            })
            .collect()
    }

    /// `w_c = median(freq) / freq_c`.
    pub fn weights(&self) -> Result<ClassWeights, TrainError> {
        let freq = self.frequencies()?;
        let mut sorted = freq.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        ClassWeights::new(freq.iter().map(|f| median / f).collect())
    }
}

/// Median-frequency class weights over every sample of `source`.
pub fn median_frequency_weights<S: SampleSource + ?Sized>(
    source: &S,
    num_classes: usize,
) -> Result<ClassWeights, TrainError> {
    let mut freq = ClassFrequencies::new(num_classes);
    for i in 0..source.len() {
        let s = source.get(i)?;
        freq.add(s.label(), s.fov_mask())?;
    }
    freq.weights()
}
