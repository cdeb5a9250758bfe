//! Image files, network input conversion and Laplacian visualisation.
//!
//! Network tensors are `1x3xHxW`, RGB, on the 0-255 scale with the
//! per-channel means subtracted.

use std::path::Path;

use image::{GrayImage, ImageFormat, ImageReader};
use thiserror::Error;

use crate::tensor::{Shape, Tensor};

/// Per-channel RGB means subtracted before the network sees an image.
pub const CHANNEL_MEANS: [f32; 3] = [123.68, 116.779, 103.939];

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: unsupported image format (expected .png, .jpg or .jpeg)")]
    Unsupported { path: String },
    #[error("degenerate image size {width}x{height}")]
    Degenerate { width: usize, height: usize },
    #[error("expected a {expected} tensor, got {found}")]
    BadTensor { expected: &'static str, found: Shape },
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(ImageError::Degenerate { width, height });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("jpg" | "jpeg") => Ok(ImageFormat::Jpeg),
        _ => Err(ImageError::Unsupported {
            path: path.display().to_string(),
        }),
    }
}

/// Reads a PNG or JPEG file; alpha is dropped and grayscale expanded.
pub fn decode(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let shown = || path.display().to_string();
    let reader = ImageReader::open(path)
        .map_err(|source| ImageError::Io { path: shown(), source })?
        .with_guessed_format()
        .map_err(|source| ImageError::Io { path: shown(), source })?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        _ => return Err(ImageError::Unsupported { path: shown() }),
    }
    let rgb = reader
        .decode()
        .map_err(|source| ImageError::Codec { path: shown(), source })?
        .into_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::new(w as usize, h as usize, rgb.into_raw())
}

/// Writes `image`; the format follows the file extension.
pub fn encode(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_for(path)?;
    image::save_buffer_with_format(
        path,
        &image.data,
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
        format,
    )
    .map_err(|source| ImageError::Codec {
        path: path.display().to_string(),
        source,
    })
}

/// Scales `(width, height)` so the longer side equals `longest`, keeping the
/// aspect ratio. Neither side drops below 1.
pub fn fit_longest_side(width: usize, height: usize, longest: usize) -> (usize, usize) {
    let scale = longest as f64 / width.max(height) as f64;
    let side = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (side(width), side(height))
}

/// Bilinear resampling with half-pixel centres and clamped edges, returning
/// interleaved RGB floats on the 0-255 scale.
fn resample(image: &RgbImage, width: usize, height: usize) -> Vec<f32> {
    if width == image.width && height == image.height {
        return image.data.iter().map(|&v| v as f32).collect();
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let xs = axis(width, image.width);
    let ys = axis(height, image.height);
    let mut out = Vec::with_capacity(width * height * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = image.pixel(x0, y0);
            let p01 = image.pixel(x1, y0);
            let p10 = image.pixel(x0, y1);
            let p11 = image.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - fx) + p01[c] as f32 * fx;
                let bottom = p10[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resize to exactly `width x height`.
pub fn resize(image: &RgbImage, width: usize, height: usize) -> Result<RgbImage> {
    if width == 0 || height == 0 {
        return Err(ImageError::Degenerate { width, height });
    }
    let data = resample(image, width, height).into_iter().map(to_u8).collect();
    RgbImage::new(width, height, data)
}

/// Resizes to `width x height` and converts to a mean-subtracted `1x3xHxW` tensor.
pub fn preprocess(image: &RgbImage, width: usize, height: usize) -> Result<Tensor> {
    if width == 0 || height == 0 {
        return Err(ImageError::Degenerate { width, height });
    }
    let pixels = resample(image, width, height);
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] - CHANNEL_MEANS[c];
        }
    }
    Ok(Tensor::from_vec(Shape::new(1, 3, height, width), data).expect("length matches shape"))
}

/// Inverse of [`preprocess`] at the tensor's own size; values are rounded and
/// clamped to 0-255.
pub fn deprocess(tensor: &Tensor) -> Result<RgbImage> {
    let s = tensor.shape();
    if s.n != 1 || s.c != 3 {
        return Err(ImageError::BadTensor {
            expected: "1x3xHxW",
            found: s,
        });
    }
    let plane = s.h * s.w;
    let src = tensor.data();
    let mut data = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            data.push(to_u8(src[c * plane + i] + CHANNEL_MEANS[c]));
        }
    }
    RgbImage::new(s.w, s.h, data)
}

/// Maps a `1x1xHxW` response to 8-bit gray by min-max scaling of absolute
/// values. A response with no spread maps to uniform 128.
pub fn laplacian_to_gray(lap: &Tensor) -> Result<Vec<u8>> {
    let s = lap.shape();
    if s.n != 1 || s.c != 1 {
        return Err(ImageError::BadTensor {
            expected: "1x1xHxW",
            found: s,
        });
    }
    let abs: Vec<f32> = lap.data().iter().map(|v| v.abs()).collect();
    let lo = abs.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = abs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Ok(vec![128; abs.len()]);
    }
    Ok(abs.iter().map(|&v| to_u8((v - lo) / span * 255.0)).collect())
}

/// Writes [`laplacian_to_gray`] of `lap` as a grayscale PNG.
pub fn export_laplacian_image(lap: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let gray = laplacian_to_gray(lap)?;
    let s = lap.shape();
    let img = GrayImage::from_raw(s.w as u32, s.h as u32, gray).expect("length matches shape");
    img.save_with_format(path, ImageFormat::Png).map_err(|source| ImageError::Codec {
        path: path.display().to_string(),
        source,
    })
}
