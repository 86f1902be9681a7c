use std::path::Path;

use image::{imageops, Rgb, Rgb32FImage, RgbImage};
use ndarray::{s, Array3, Axis};

use crate::backbone::{BackboneSpec, ImageTensor};
use crate::error::{GazeError, Result};

/// An RGB image with values in `[0, 1]`, channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    pub data: Array3<f32>,
}

impl RgbFrame {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(GazeError::shape("frame channels", 3, data.shape()[0]));
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self {
            data: Array3::from_shape_fn((3, height, width), |(c, _, _)| rgb[c]),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        [self.data[[0, row, col]], self.data[[1, row, col]], self.data[[2, row, col]]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[[c, row, col]] = v;
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb32f();
        Ok(Self::from_rgb32f(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    fn from_rgb32f(img: &Rgb32FImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c].clamp(0.0, 1.0)
        });
        Self { data }
    }

    fn to_rgb32f(&self) -> Rgb32FImage {
        Rgb32FImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p)
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    /// Bilinear resize.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height(), self.width()) {
            return self.clone();
        }
        let out = imageops::resize(&self.to_rgb32f(), width as u32, height as u32, imageops::FilterType::Triangle);
        Self::from_rgb32f(&out)
    }

    pub fn flipped_horizontal(&self) -> Self {
        Self {
            data: self.data.slice(s![.., .., ..;-1]).to_owned(),
        }
    }

    /// Pixel sub-window `[top, top+height) × [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            data: self
                .data
                .slice(s![.., top..top + height, left..left + width])
                .to_owned(),
        }
    }

    /// Resizes to the backbone input size and applies its mean/std normalization.
    pub fn to_tensor(&self, spec: &BackboneSpec) -> ImageTensor {
        let n = spec.input_size;
        let mut data = self.resized(n, n).data;
        for (c, mut plane) in data.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (spec.mean[c], spec.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        ImageTensor { data }
    }
}
