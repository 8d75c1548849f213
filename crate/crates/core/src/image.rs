//! Images in `[0, 1]`, binary PNM I/O, tensor conversion and patch extraction.

use rand::seq::SliceRandom;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// H×W×C image with samples in `[0, 1]`, row-major and channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, samples: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty image {height}×{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels (expected 1 or 3)")));
        }
        if samples.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{} samples for {height}×{width}×{channels}",
                samples.len()
            )));
        }
        if let Some(s) = samples.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidImage(format!("sample {s} outside [0, 1]")));
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            samples,
        })
    }

    /// Builds an image from arbitrary reals, clamping each into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, samples: Vec<f64>) -> Result<Self> {
        let samples = samples.into_iter().map(clamp_unit).collect();
        ImageBuffer::new(height, width, channels, samples)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        ImageBuffer::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    /// Copy of the `size × size` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<ImageBuffer> {
        if y + height > self.height || x + width > self.width {
            return Err(Error::InvalidImage(format!(
                "crop {height}×{width} at ({y}, {x}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        let mut samples = Vec::with_capacity(height * width * self.channels);
        for row in y..y + height {
            let start = (row * self.width + x) * self.channels;
            samples.extend_from_slice(&self.samples[start..start + width * self.channels]);
        }
        ImageBuffer::new(height, width, self.channels, samples)
    }

    /// Single-image NCHW tensor `[1, C, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        images_to_tensor(std::slice::from_ref(self)).expect("single image batch")
    }

    /// Image from a `[1, C, H, W]` or `[C, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<ImageBuffer> {
        let mut images = tensor_to_images(t, true)?;
        if images.len() != 1 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "expected a single image".into(),
            });
        }
        Ok(images.remove(0))
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Stacks equally sized images into an NCHW tensor. Values are copied
/// without any resampling.
pub fn images_to_tensor(images: &[ImageBuffer]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidImage("empty batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if !img.same_dims(first) {
            return Err(Error::ShapeMismatch {
                op: "images_to_tensor",
                left: vec![h, w, c],
                right: vec![img.height, img.width, img.channels],
            });
        }
        for ch in 0..c {
            data.extend(img.samples.iter().skip(ch).step_by(c));
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Splits an NCHW (or CHW) tensor into images. When `clamp` is false,
/// out-of-range values are rejected.
pub fn tensor_to_images(t: &Tensor, clamp: bool) -> Result<Vec<ImageBuffer>> {
    let (n, c, h, w) = match *t.shape() {
        [n, c, h, w] => (n, c, h, w),
        [c, h, w] => (1, c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "expected NCHW".into(),
            })
        }
    };
    let plane = h * w;
    let data = t.data();
    (0..n)
        .map(|i| {
            let base = i * c * plane;
            let mut samples = vec![0.0; c * plane];
            for ch in 0..c {
                for p in 0..plane {
                    samples[p * c + ch] = data[base + ch * plane + p];
                }
            }
            if clamp {
                ImageBuffer::from_clamped(h, w, c, samples)
            } else {
                ImageBuffer::new(h, w, c, samples)
            }
        })
        .collect()
}

fn pnm_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Pnm {
        offset,
        reason: reason.into(),
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(pnm_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pnm_err(start, format!("{what} out of range")))
    }
}

/// Parses binary P5 (grayscale) or P6 (RGB) with maxval 255.
pub fn read_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(pnm_err(0, "expected magic P5 or P6")),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_whitespace_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(pnm_err(2, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(pnm_err(maxval_at, format!("maxval {maxval} unsupported (must be 255)")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(pnm_err(cur.pos, "missing whitespace after maxval")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| pnm_err(2, "dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(pnm_err(
            bytes.len(),
            format!("truncated payload: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(pnm_err(cur.pos + expected, "trailing bytes after payload"));
    }
    let samples = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageBuffer::new(height, width, channels, samples)
}

/// Quantizes one sample to a byte, rounding half up.
pub fn sample_to_byte(s: f64) -> u8 {
    (clamp_unit(s) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Serializes as binary P5/P6 with the canonical header
/// `P5\n<width> <height>\n255\n`.
pub fn write_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.samples.iter().map(|&s| sample_to_byte(s)));
    out
}

/// Round trip through 8-bit precision.
pub fn quantize_to_bytes(img: &ImageBuffer) -> ImageBuffer {
    let samples = img.samples.iter().map(|&s| f64::from(sample_to_byte(s)) / 255.0).collect();
    ImageBuffer::new(img.height, img.width, img.channels, samples).expect("quantized samples stay in range")
}

pub fn load_pnm(path: &std::path::Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pnm(&bytes)
}

pub fn save_pnm(path: &std::path::Path, img: &ImageBuffer) -> Result<()> {
    std::fs::write(path, write_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Top-left corners of every `size × size` window on a `stride` grid,
/// shuffled under `seed`. Identical arguments give identical lists, so the
/// same geometry applied to a compressed/raw pair yields aligned patches.
pub fn patch_positions(height: usize, width: usize, size: usize, stride: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidImage("patch size and stride must be positive".into()));
    }
    if size > height.min(width) {
        return Err(Error::InvalidImage(format!(
            "patch size {size} exceeds image {height}×{width}"
        )));
    }
    let mut positions: Vec<(usize, usize)> = (0..=(height - size) / stride)
        .flat_map(|i| (0..=(width - size) / stride).map(move |j| (i * stride, j * stride)))
        .collect();
    positions.shuffle(&mut stream_rng(seed, Stream::Patches));
    Ok(positions)
}

pub fn extract_patches(img: &ImageBuffer, size: usize, stride: usize, seed: u64) -> Result<Vec<ImageBuffer>> {
    patch_positions(img.height, img.width, size, stride, seed)?
        .into_iter()
        .map(|(y, x)| img.crop(y, x, size, size))
        .collect()
}
