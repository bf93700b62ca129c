use crate::error::{Error, Result};
use crate::numerics::interp::bilinear_sample;
use crate::numerics::{Real, Tensor};

pub const CHANNELS: usize = 3;

/// RGB raster with interleaved channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Integer pixel rectangle inside a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * CHANNELS {
            return Err(Error::invalid(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[height × width × 3]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, CHANNELS],
            self.data.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect(),
        )
        .expect("image extents are positive")
    }

    pub fn crop(&self, rect: Rect) -> Result<Image> {
        if rect.width == 0
            || rect.height == 0
            || rect.x + rect.width > self.width
            || rect.y + rect.height > self.height
        {
            return Err(Error::invalid(format!(
                "crop {rect:?} outside {}x{} frame",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(rect.width * rect.height * CHANNELS);
        for y in rect.y..rect.y + rect.height {
            let start = (y * self.width + rect.x) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + rect.width * CHANNELS]);
        }
        Image::new(rect.width, rect.height, data)
    }

    /// Bilinear resize with half-pixel centers and clamped borders.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = vec![0.0f32; width * height * CHANNELS];
        for oy in 0..height {
            let y = (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..width {
                let x = (ox as f64 + 0.5) * sx - 0.5;
                let i = (oy * width + ox) * CHANNELS;
                bilinear_sample(
                    &self.data,
                    self.width,
                    self.height,
                    CHANNELS,
                    x,
                    y,
                    &mut data[i..i + CHANNELS],
                );
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_identity_resize() {
        let data: Vec<f32> = (0..4 * 3 * 3).map(|i| i as f32 / 36.0).collect();
        let img = Image::new(4, 3, data).unwrap();
        let c = img.crop(Rect { x: 1, y: 1, width: 2, height: 2 }).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(1, 1));
        assert_eq!(c.pixel(1, 1), img.pixel(2, 2));
        assert_eq!(img.resize_bilinear(4, 3), img);
        assert!(img.crop(Rect { x: 3, y: 0, width: 2, height: 1 }).is_err());
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = Image::filled(5, 7, [0.2, 0.4, 0.6]);
        let r = img.resize_bilinear(3, 11);
        for y in 0..11 {
            for x in 0..3 {
                let p = r.pixel(x, y);
                assert!((p[0] - 0.2).abs() < 1e-6 && (p[2] - 0.6).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let data: Vec<f32> = (0..5 * 2 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let img = Image::new(5, 2, data).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().pixel(0, 1), img.pixel(4, 1));
    }
}
