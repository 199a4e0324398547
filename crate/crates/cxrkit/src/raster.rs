//! Canonical 8-bit image representation and the label-preserving primitives
//! shared by every pipeline stage.

use std::fmt;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel normalization statistics commonly used with backbones that
/// were pretrained on large natural-image corpora.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

///// The two diagnostic classes. The set is closed: there is no third label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Covid,
    Normal,
}

impl ClassLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::Covid => "covid",
            ClassLabel::Normal => "normal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "covid" => Ok(ClassLabel::Covid),
            "normal" => Ok(ClassLabel::Normal),
            other => Err(Error::InvalidData(format!(
                "unknown class label {other:?}; expected \"covid\" or \"normal\""
            ))),
        }
    }

    /// The opposite class, used for counterfactual explanations.
    pub fn other(&self) -> Self {
        match self {
            ClassLabel::Covid => ClassLabel::Normal,
            ClassLabel::Normal => ClassLabel::Covid,
        }
    }

    /// Class index in model heads: covid scores come first.
    pub fn index(&self) -> usize {
        match self {
            ClassLabel::Covid => 0,
            ClassLabel::Normal => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ClassLabel::Covid),
            1 => Ok(ClassLabel::Normal),
            other => Err(Error::InvalidData(format!("class index {other} out of range"))),
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major interleaved 8-bit pixel grid with 1 (grayscale) or 3 (RGB)
/// channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be >= 1, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "pixel buffer holds {} values, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Single-channel image with every pixel set to `value`.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        RasterImage::new(width, height, 1, vec![value; width * height]).expect("valid dims")
    }

    /// Image built from a per-sample function of (x, y, channel).
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(x, y, c));
                }
            }
        }
        RasterImage::new(width, height, channels, pixels).expect("valid dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn is_grayscale(&self) -> bool {
        self.channels == 1
    }

    /// Reads a PNG or JPEG file. Gray sources stay single-channel, everything
    /// else is decoded to RGB.
    pub fn open(path: &Path) -> Result<Self> {
        let decoded = image::open(path)?;
        let img = match decoded {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                RasterImage::new(w as usize, h as usize, 1, g.into_raw())?
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                RasterImage::new(w as usize, h as usize, 3, rgb.into_raw())?
            }
        };
        Ok(img)
    }

    /// Writes the image with the format implied by the file extension
    /// (PNG or JPEG, 8 bit per channel).
    pub fn save(&self, path: &Path) -> Result<()> {
        match self.channels {
            1 => {
                let buf: image::GrayImage = image::ImageBuffer::from_raw(
                    self.width as u32,
                    self.height as u32,
                    self.pixels.clone(),
                )
                .expect("buffer length checked at construction");
                buf.save(path)?;
            }
            _ => {
                let buf: image::RgbImage = image::ImageBuffer::from_raw(
                    self.width as u32,
                    self.height as u32,
                    self.pixels.clone(),
                )
                .expect("buffer length checked at construction");
                buf.save(path)?;
            }
        }
        Ok(())
    }
}

/// An image paired with its ground-truth class and a stable identifier for
/// provenance tracking.
///
/// Images produced by augmentation carry the identifier of the original they
/// derive from, so leakage checks can trace any derived image back to its
/// source.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: RasterImage,
    pub label: ClassLabel,
    pub source_id: String,
    origin: Option<String>,
}

impl LabeledImage {
    pub fn new(image: RasterImage, label: ClassLabel, source_id: impl Into<String>) -> Self {
        LabeledImage {
            image,
            label,
            source_id: source_id.into(),
            origin: None,
        }
    }

    /// Builds an image derived from `origin` (an original image's
    /// `source_id`), marking it as augmented.
    pub fn derived(
        image: RasterImage,
        label: ClassLabel,
        source_id: impl Into<String>,
        origin: impl Into<String>,
    ) -> Self {
        LabeledImage {
            image,
            label,
            source_id: source_id.into(),
            origin: Some(origin.into()),
        }
    }

    /// True for images produced by augmentation rather than read from a
    /// source dataset.
    pub fn is_augmented(&self) -> bool {
        self.origin.is_some()
    }

    /// The original image this one derives from, if augmented.
    pub fn origin(&self) -> Option<&str> {
        self.origin.as_deref()
    }

    /// The identifier leakage checks should compare: the root source for
    /// augmented images, the image's own id otherwise.
    pub fn lineage_id(&self) -> &str {
        self.origin.as_deref().unwrap_or(&self.source_id)
    }

    /// Same label and lineage with different pixels, e.g. after resizing or
    /// enhancement.
    pub fn with_image(&self, image: RasterImage) -> LabeledImage {
        LabeledImage {
            image,
            label: self.label,
            source_id: self.source_id.clone(),
            origin: self.origin.clone(),
        }
    }
}

/// Converts to single-channel luminance with the broadcast weights
/// 0.299 R + 0.587 G + 0.114 B. Single-channel input is returned unchanged.
pub fn to_grayscale(img: &RasterImage) -> Result<RasterImage> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let mut pixels = Vec::with_capacity(img.width * img.height);
            for px in img.pixels.chunks_exact(3) {
                let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                pixels.push(luma.round().clamp(0.0, 255.0) as u8);
            }
            RasterImage::new(img.width, img.height, 1, pixels)
        }
        c => Err(Error::InvalidImage(format!(
            "grayscale conversion needs 1 or 3 channels, got {c}"
        ))),
    }
}

/// Bilinear resize to exactly `w` x `h`, using half-pixel sample centers.
/// Resizing to the source dimensions is an exact no-op.
pub fn resize(img: &RasterImage, w: usize, h: usize) -> Result<RasterImage> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be >= 1, got {w}x{h}"
        )));
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    let mut pixels = vec![0u8; w * h * img.channels];
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..img.channels {
                let p00 = img.get(x0, y0, c) as f64;
                let p10 = img.get(x1, y0, c) as f64;
                let p01 = img.get(x0, y1, c) as f64;
                let p11 = img.get(x1, y1, c) as f64;
                let top = p00 + (p10 - p00) * wx;
                let bottom = p01 + (p11 - p01) * wx;
                let v = top + (bottom - top) * wy;
                pixels[(y * w + x) * img.channels + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RasterImage::new(w, h, img.channels, pixels)
}

/// Nearest-neighbor resize. Used for binary masks where interpolation would
/// fabricate intermediate values.
pub fn resize_nearest(img: &RasterImage, w: usize, h: usize) -> Result<RasterImage> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be >= 1, got {w}x{h}"
        )));
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let mut pixels = vec![0u8; w * h * img.channels];
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * img.height as f64 / h as f64).floor() as usize)
            .min(img.height - 1);
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * img.width as f64 / w as f64).floor() as usize)
                .min(img.width - 1);
            for c in 0..img.channels {
                pixels[(y * w + x) * img.channels + c] = img.get(sx, sy, c);
            }
        }
    }
    RasterImage::new(w, h, img.channels, pixels)
}

/// Maps each pixel to `(v/255 - mean[c]) / std[c]`, returning a real-valued
/// grid with shape (channels, height, width).
pub fn normalize_for_model(img: &RasterImage, mean: &[f64], std: &[f64]) -> Result<Array3<f64>> {
    if mean.len() != img.channels || std.len() != img.channels {
        return Err(Error::InvalidArgument(format!(
            "normalization stats have {} components, image has {} channels",
            mean.len().min(std.len()),
            img.channels
        )));
    }
    if let Some(i) = std.iter().position(|&s| s == 0.0) {
        return Err(Error::InvalidArgument(format!(
            "std component {i} is zero"
        )));
    }
    let mut out = Array3::<f64>::zeros((img.channels, img.height, img.width));
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out[[c, y, x]] = (img.get(x, y, c) as f64 / 255.0 - mean[c]) / std[c];
            }
        }
    }
    Ok(out)
}
