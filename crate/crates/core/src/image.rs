//! Grayscale image buffers in `[0, 1]` plus PNG and resampling helpers.

use std::path::Path;

use image::{imageops, imageops::FilterType, ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Single-channel image, indexed `[row, col]`, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub pixels: Array2<f64>,
}

impl GrayImage {
    pub fn new(pixels: Array2<f64>) -> Self {
        Self { pixels }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> f64) -> Self {
        Self::new(Array2::from_shape_fn((height, width), f))
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Row-major pixel vector.
    pub fn to_vec(&self) -> Vec<f64> {
        self.pixels.iter().copied().collect()
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Array2::from_shape_vec((height, width), data)
            .map(Self::new)
            .map_err(|e| Error::invalid(format!("image shape: {e}")))
    }

    pub fn clamped(&self) -> Self {
        Self::new(self.pixels.mapv(|v| v.clamp(0.0, 1.0)))
    }

    /// 8-bit quantised copy (what a PNG round trip yields).
    pub fn quantized(&self) -> Self {
        Self::new(
            self.pixels
                .mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0),
        )
    }

    fn to_luma_f32(&self) -> ImageBuffer<Luma<f32>, Vec<f32>> {
        let (h, w) = self.dims();
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([self.pixels[[y as usize, x as usize]] as f32])
        })
    }

    fn from_luma_f32(buf: &ImageBuffer<Luma<f32>, Vec<f32>>) -> Self {
        let (w, h) = buf.dimensions();
        Self::from_fn(h as usize, w as usize, |(r, c)| {
            buf.get_pixel(c as u32, r as u32)[0] as f64
        })
    }

    /// Bilinear (triangle-filter) resampling to `width × height`.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let buf = self.to_luma_f32();
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Self::from_luma_f32(&out)
    }

    /// Centered crop; the crop must fit inside the image.
    pub fn center_crop(&self, width: usize, height: usize) -> Result<Self> {
        let (h, w) = self.dims();
        if width > w || height > h {
            return Err(Error::invalid(format!(
                "crop {width}x{height} larger than image {w}x{h}"
            )));
        }
        let top = (h - height) / 2;
        let left = (w - width) / 2;
        Ok(Self::new(
            self.pixels
                .slice(ndarray::s![top..top + height, left..left + width])
                .to_owned(),
        ))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dims();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let v = self.pixels[[y as usize, x as usize]].clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        });
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, |(r, c)| {
            img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0
        }))
    }
}
