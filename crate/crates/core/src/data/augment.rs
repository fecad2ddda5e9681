use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Sample, SampleSource};

/// `(cos θ, sin θ)` with exact values at multiples of 90°.
fn cos_sin(degrees: f64) -> (f64, f64) {
    let d = degrees.rem_euclid(360.0);
    if d == 0.0 {
        (1.0, 0.0)
    } else if d == 90.0 {
        (0.0, 1.0)
    } else if d == 180.0 {
        (-1.0, 0.0)
    } else if d == 270.0 {
        (0.0, -1.0)
    } else {
        let r = d.to_radians();
        (r.cos(), r.sin())
    }
}

/// Rotates a sample about its centre on a fixed canvas.
///
/// The image is resampled bilinearly, label and mask by nearest neighbour;
/// pixels mapped from outside the source are zero (mask `false`).
pub fn rotate_sample(sample: &Sample, degrees: f64) -> Sample {
    let (h, w, c) = (sample.height, sample.width, sample.channels);
    let (cos, sin) = cos_sin(degrees);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut image = vec![0.0f32; h * w * c];
    let mut label = vec![0u8; h * w];
    let mut mask = sample.fov_mask.as_ref().map(|_| vec![false; h * w]);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let o = y * w + x;

            let (ny, nx) = (sy.round() as i64, sx.round() as i64);
            if inside(ny, nx) {
                let n = ny as usize * w + nx as usize;
                label[o] = sample.label[n];
                if let (Some(out), Some(m)) = (mask.as_mut(), sample.fov_mask.as_ref()) {
                    out[o] = m[n];
                }
            }

            let (y0, x0) = (sy.floor(), sx.floor());
            let (ty, tx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            for ch in 0..c {
                let at = |yy: i64, xx: i64| {
                    if inside(yy, xx) {
                        sample.image[(yy as usize * w + xx as usize) * c + ch] as f64
                    } else {
                        0.0
                    }
                };
                let mut v = at(y0, x0) * (1.0 - tx) * (1.0 - ty);
                if tx != 0.0 {
                    v += at(y0, x0 + 1) * tx * (1.0 - ty);
                }
                if ty != 0.0 {
                    v += at(y0 + 1, x0) * (1.0 - tx) * ty;
                    if tx != 0.0 {
                        v += at(y0 + 1, x0 + 1) * tx * ty;
                    }
                }
                image[o * c + ch] = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    Sample {
        id: sample.id.clone(),
        height: h,
        width: w,
        channels: c,
        image,
        label,
        fov_mask: mask,
    }
}

/// Scales image intensities by `gain`, clamping to `[0, 1]`.
pub fn adjust_brightness(sample: &Sample, gain: f64) -> Result<Sample, DataError> {
    if !(gain.is_finite() && gain > 0.0) {
        return Err(DataError::Gain(gain));
    }
    let g = gain as f32;
    let mut out = sample.clone();
    for v in &mut out.image {
        *v = (*v * g).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Rotations at 0°, 1°, … per source image.
    pub rotations: usize,
    pub brightness_variants: usize,
    pub gain_range: (f64, f64),
    /// Gains inside this interval are redrawn.
    pub gain_exclusion: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotations: 360,
            brightness_variants: 20,
            gain_range: (0.7, 1.3),
            gain_exclusion: (0.98, 1.02),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn per_image(&self) -> usize {
        self.rotations + self.brightness_variants
    }
}

/// Lazily generated augmentations of a source set.
///
/// Index `i` maps to source image `i / per_image`; the first `rotations`
/// variants are rotations by `k` degrees, the rest are brightness changes with
/// gains fixed at construction.
pub struct AugmentedSet<S> {
    source: S,
    config: AugmentConfig,
    gains: Vec<f64>,
}

pub fn augment_training_set<S: SampleSource>(source: S, config: AugmentConfig) -> Result<AugmentedSet<S>, DataError> {
    if source.is_empty() {
        return Err(DataError::Empty);
    }
    let (lo, hi) = config.gain_range;
    let (xlo, xhi) = config.gain_exclusion;
    let has_mass = lo < xlo.min(hi) || hi > xhi.max(lo);
    if !(lo > 0.0 && lo < hi && hi.is_finite()) || (config.brightness_variants > 0 && !has_mass) {
        return Err(DataError::GainRange { lo, hi });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = source.len() * config.brightness_variants;
    let gains = (0..n)
        .map(|_| loop {
            let g = rng.random_range(lo..hi);
            if !(xlo..=xhi).contains(&g) {
                break g;
            }
        })
        .collect();
    Ok(AugmentedSet { source, config, gains })
}

impl<S: SampleSource> AugmentedSet<S> {
    pub fn config(&self) -> &AugmentConfig {
        &self.config
    }

    pub fn source(&self) -> &S {
        &self.source
    }

    /// Gains drawn for every brightness variant, in index order.
    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn materialize(&self) -> Result<Vec<Sample>, DataError> {
        self.iter().collect()
    }
}

impl<S: SampleSource> SampleSource for AugmentedSet<S> {
    fn len(&self) -> usize {
        self.source.len() * self.config.per_image()
    }

    fn get(&self, index: usize) -> Result<Sample, DataError> {
        if index >= self.len() {
            return Err(DataError::Index { index, len: self.len() });
        }
        let per = self.config.per_image();
        let (src, k) = (index / per, index % per);
        let base = self.source.get(src)?;
        if k < self.config.rotations {
            let id = format!("{}_rot{k:03}", base.id);
            Ok(rotate_sample(&base, k as f64).with_id(id))
        } else {
            let v = k - self.config.rotations;
            let gain = self.gains[src * self.config.brightness_variants + v];
            let id = format!("{}_gain{v:02}", base.id);
            Ok(adjust_brightness(&base, gain)?.with_id(id))
        }
    }
}
