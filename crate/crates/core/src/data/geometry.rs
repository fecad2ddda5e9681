use super::{DataError, Sample, SampleSource};

/// Records how a sample was padded so predictions can be cropped back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl CropRecord {
    pub fn is_identity(&self) -> bool {
        self.height == self.padded_height && self.width == self.padded_width
    }

    /// Crops a padded `padded_height×padded_width` plane back to the original size.
    pub fn crop_plane<T: Copy>(&self, plane: &[T]) -> Vec<T> {
        assert_eq!(plane.len(), self.padded_height * self.padded_width);
        (0..self.height)
            .flat_map(|y| plane[y * self.padded_width..y * self.padded_width + self.width].iter().copied())
            .collect()
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads bottom and right edges up to a multiple of `multiple`.
///
/// The image is reflect-padded, the label zero-padded, and the mask padded with
/// `false`. A mask is created when the sample has none so padding never counts
/// towards losses or metrics.
pub fn pad_to_multiple(sample: &Sample, multiple: usize) -> (Sample, CropRecord) {
    let multiple = multiple.max(1);
    let (h, w, c) = (sample.height, sample.width, sample.channels);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let record = CropRecord {
        height: h,
        width: w,
        padded_height: ph,
        padded_width: pw,
    };
    if record.is_identity() {
        return (sample.clone(), record);
    }
    let mut image = Vec::with_capacity(ph * pw * c);
    let mut label = vec![0u8; ph * pw];
    let mut mask = vec![false; ph * pw];
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            let sx = reflect(x, w);
            let src = sy * w + sx;
            image.extend_from_slice(&sample.image[src * c..(src + 1) * c]);
            if y < h && x < w {
                label[y * pw + x] = sample.label[src];
                mask[y * pw + x] = sample.counted(src);
            }
        }
    }
    let padded = Sample {
        id: sample.id.clone(),
        height: ph,
        width: pw,
        channels: c,
        image,
        label,
        fov_mask: Some(mask),
    };
    (padded, record)
}

/// Resizes to `height×width`: bilinear for the image, nearest for label and mask.
pub fn resize_sample(sample: &Sample, height: usize, width: usize) -> Result<Sample, DataError> {
    let (h, w, c) = (sample.height, sample.width, sample.channels);
    if (h, w) == (height, width) {
        return Ok(sample.clone());
    }
    if height == 0 || width == 0 {
        return Err(DataError::InvalidSample {
            id: sample.id.clone(),
            message: format!("cannot resize to {height}x{width}"),
        });
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let src = |o: usize, s: f64, n: usize| ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
    let nearest = |o: usize, s: f64, n: usize| (((o as f64 + 0.5) * s) as usize).min(n - 1);
    let mut image = Vec::with_capacity(height * width * c);
    let mut label = Vec::with_capacity(height * width);
    let mut mask = sample.fov_mask.as_ref().map(|_| Vec::with_capacity(height * width));
    for y in 0..height {
        let fy = src(y, sy, h);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        let ny = nearest(y, sy, h);
        for x in 0..width {
            let fx = src(x, sx, w);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| sample.image[(yy * w + xx) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                image.push(((top * (1.0 - ty) + bottom * ty) as f32).clamp(0.0, 1.0));
            }
            let n = ny * w + nearest(x, sx, w);
            label.push(sample.label[n]);
            if let (Some(out), Some(m)) = (mask.as_mut(), sample.fov_mask.as_ref()) {
                out.push(m[n]);
            }
        }
    }
    Sample::new(sample.id.clone(), (height, width, c), image, label, mask)
}

/// Pads every sample of the wrapped source to a size multiple.
pub struct Padded<S> {
    pub source: S,
    pub multiple: usize,
}

impl<S: SampleSource> SampleSource for Padded<S> {
    fn len(&self) -> usize {
        self.source.len()
    }

    fn get(&self, index: usize) -> Result<Sample, DataError> {
        Ok(pad_to_multiple(&self.source.get(index)?, self.multiple).0)
    }
}
