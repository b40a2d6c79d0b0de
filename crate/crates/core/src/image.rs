//! Row-major grayscale image buffer with values in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::CoreError;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self, CoreError> {
        if data.len() != width * height {
            return Err(CoreError::Contract(alloc::format!(
                "image data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn require_same_shape(&self, other: &Image) -> Result<(), CoreError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CoreError::Contract(alloc::format!(
                "image dimensions differ: {}x{} vs {}x{}",
                self.width,
                self.height,
                other.width,
                other.height
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean over the pixel rectangle `[x0, x1) x [y0, y1)`.
    pub fn region_mean(&self, x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                sum += self.at(x, y);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// 2x2 mean pooling; trailing odd row/column is dropped.
    pub fn downsample2(&self) -> Image {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut out = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * x, 2 * y)
                    + self.at(2 * x + 1, 2 * y)
                    + self.at(2 * x, 2 * y + 1)
                    + self.at(2 * x + 1, 2 * y + 1);
                out.set(x, y, 0.25 * s);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_mean_of_constant() {
        let img = Image::filled(8, 8, 0.3);
        assert!((img.region_mean(2, 6, 1, 7) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn downsample_averages_quads() {
        let mut img = Image::zeros(4, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let d = img.downsample2();
        assert_eq!((d.width, d.height), (2, 1));
        // quad (0,1,4,5) and (2,3,6,7)
        assert!((d.at(0, 0) - 2.5).abs() < 1e-15);
        assert!((d.at(1, 0) - 4.5).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = Image::zeros(4, 4);
        let b = Image::zeros(4, 5);
        assert!(a.require_same_shape(&b).is_err());
    }
}
