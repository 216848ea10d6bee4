//! RGB frames stored as `f32` in `[0, 1]`, row-major, channels last.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};

/// Smallest side accepted by [`Frame::preprocess`].
pub const MIN_TARGET_SIDE: usize = 8;

/// Frames of one video in temporal order.
pub type FrameSequence = Vec<Frame>;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    pub source_id: String,
    pub index: usize,
}

impl Frame {
    /// Wraps an `height × width × 3` buffer. Values must be finite and lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!("empty frame {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {height}x{width} RGB frame, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels, height, width, source_id: String::new(), index: 0 })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = std::iter::repeat_n(rgb, height * width).flatten().collect();
        Self::new(height, width, pixels)
    }

    pub fn with_origin(mut self, source_id: impl Into<String>, index: usize) -> Self {
        self.source_id = source_id.into();
        self.index = index;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Side length of a square frame, `None` otherwise.
    pub fn side(&self) -> Option<usize> {
        (self.height == self.width).then_some(self.height)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Channels-first copy (`3 × H × W`), the layout tensors expect.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    /// Inverse of [`Frame::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let plane = height * width;
        if chw.len() != plane * 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} channel-first values, got {}",
                plane * 3,
                chw.len()
            )));
        }
        let mut pixels = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                pixels[i * 3 + c] = chw[c * plane + i].clamp(0.0, 1.0);
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let pixels = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Self {
            pixels,
            height: img.height() as usize,
            width: img.width() as usize,
            source_id: String::new(),
            index: 0,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Center crop to the largest square.
    pub fn center_crop_square(&self) -> Frame {
        let side = self.height.min(self.width);
        let top = (self.height - side) / 2;
        let left = (self.width - side) / 2;
        let mut pixels = Vec::with_capacity(side * side * 3);
        for y in top..top + side {
            let row = (y * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + side * 3]);
        }
        Frame {
            pixels,
            height: side,
            width: side,
            source_id: self.source_id.clone(),
            index: self.index,
        }
    }

    /// Resamples with a triangle (bilinear, antialiased when shrinking) filter.
    pub fn resize(&self, height: usize, width: usize) -> Frame {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let img = Rgb32FImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length matches dimensions");
        let resized: image::ImageBuffer<Rgb<f32>, Vec<f32>> =
            imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
        let pixels = resized.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Frame { pixels, height, width, source_id: self.source_id.clone(), index: self.index }
    }

    /// Aspect-preserving square crop followed by a resize to `target × target`.
    pub fn preprocess(&self, target: usize) -> Result<Frame> {
        if target < MIN_TARGET_SIDE {
            return Err(Error::InvalidTarget(target));
        }
        Ok(self.center_crop_square().resize(target, target))
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn mean_abs_diff(&self, other: &Frame) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let total: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum();
        Ok(total / self.pixels.len() as f64)
    }
}
