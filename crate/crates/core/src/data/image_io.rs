use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageError, ImageReader, Luma, Rgb};

use super::DataError;

/// Labels at or above this normalized intensity are foreground.
pub const LABEL_THRESHOLD: f32 = 0.5;

/// Decoded pixels, row-major `H×W×C`, normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

fn decode_err(path: &Path, e: ImageError) -> DataError {
    match e {
        ImageError::IoError(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        ImageError::Unsupported(u) => DataError::Unsupported {
            path: path.to_path_buf(),
            message: u.to_string(),
        },
        other => DataError::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Decodes an image file into `channels` channels (1 or 3).
///
/// 8-bit values are divided by 255 and 16-bit values by 65535. Grayscale
/// sources are replicated when three channels are requested; colour sources
/// are reduced to luma when one is requested.
pub fn decode_image(path: &Path, channels: usize) -> Result<Image, DataError> {
    let reader = ImageReader::open(path)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    if reader.format().is_none() {
        return Err(DataError::Unsupported {
            path: path.to_path_buf(),
            message: "unrecognized image format".into(),
        });
    }
    let img = reader.decode().map_err(|e| decode_err(path, e))?;
    from_dynamic(&img, channels).map_err(|message| DataError::Unsupported {
        path: path.to_path_buf(),
        message,
    })
}

fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Image, String> {
    let (width, height) = (img.width() as usize, img.height() as usize);
    let gray = !img.color().has_color();
    let data = match (channels, gray) {
        (1, _) => img.to_luma32f().into_raw(),
        (3, false) => img.to_rgb32f().into_raw(),
        (3, true) => img
            .to_luma32f()
            .into_raw()
            .into_iter()
            .flat_map(|v| [v; 3])
            .collect(),
        (c, _) => return Err(format!("{c} channels requested, only 1 or 3 are supported")),
    };
    Ok(Image {
        height,
        width,
        channels,
        data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    })
}

/// Thresholds the first channel at [`LABEL_THRESHOLD`].
pub fn binarize_label(image: &Image) -> Vec<u8> {
    image
        .data
        .chunks(image.channels)
        .map(|px| u8::from(px[0] >= LABEL_THRESHOLD))
        .collect()
}

fn save<P, C>(buf: Option<ImageBuffer<P, C>>, path: &Path) -> Result<(), DataError>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let buf = buf.ok_or_else(|| DataError::InvalidSample {
        id: path.display().to_string(),
        message: "pixel buffer does not match dimensions".into(),
    })?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| decode_err(path, e))
}

pub fn write_gray8_png(path: &Path, height: usize, width: usize, data: Vec<u8>) -> Result<(), DataError> {
    save(ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, data), path)
}

pub fn write_gray16_png(path: &Path, height: usize, width: usize, data: Vec<u16>) -> Result<(), DataError> {
    save(ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, data), path)
}

/// `data` is row-major RGB triples.
pub fn write_rgb_png(path: &Path, height: usize, width: usize, data: Vec<u8>) -> Result<(), DataError> {
    save(ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, data), path)
}
