//! 8-bit RGB images and per-pixel label maps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Interleaved RGB image, row-major, values 0–255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::contract(format!(
                "RGB buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: rgb
                .iter()
                .copied()
                .cycle()
                .take(width * height * 3)
                .collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(x, y));
            }
        }
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Per-channel `(v − mean) / std` into an `H×W×3` tensor.
pub fn normalize_image<T: Scalar>(image: &RgbImage, mean: [f64; 3], std: [f64; 3]) -> Tensor<T> {
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| T::of((v as f64 - mean[i % 3]) / std[i % 3]))
        .collect();
    Tensor::new(&[image.height, image.width, 3], data).expect("image buffer matches its size")
}

/// Per-pixel class ids, row-major. [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::contract(format!(
                "label buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(LabelMap {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        LabelMap {
            width,
            height,
            data: vec![label; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        LabelMap {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Nearest-neighbour resize (pixel centers), so no new label values appear.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let src = |out: usize, inp: usize, d: usize| {
            (((d as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
        };
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = src(height, self.height, y);
            for x in 0..width {
                data.push(self.get(src(width, self.width, x), sy));
            }
        }
        LabelMap {
            width,
            height,
            data,
        }
    }

    /// Checks that every value is a class id below `num_classes` or the ignore label.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(i) => Err(Error::contract(format!(
                "label {} at pixel ({}, {}) is outside [0, {num_classes}) and not {IGNORE_LABEL}",
                self.data[i],
                i % self.width,
                i / self.width
            ))),
            None => Ok(()),
        }
    }
}

/// An image paired with its ground-truth labels (same width and height).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: RgbImage, labels: LabelMap) -> Result<Self> {
        if image.width != labels.width || image.height != labels.height {
            return Err(Error::contract(format!(
                "image is {}x{} but labels are {}x{}",
                image.width, image.height, labels.width, labels.height
            )));
        }
        Ok(Sample { image, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_are_involutions() {
        let img = RgbImage::new(3, 2, (0..18).collect()).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().pixel(0, 0), img.pixel(2, 0));
        let lab = LabelMap::new(3, 2, vec![0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(lab.flip_horizontal().data, vec![2, 1, 0, 5, 4, 3]);
        assert_eq!(lab.flip_horizontal().flip_horizontal(), lab);
    }

    #[test]
    fn nearest_resize_only_uses_existing_labels() {
        let lab = LabelMap::new(3, 2, vec![0, 1, 2, 255, 4, 5]).unwrap();
        let up = lab.resize_nearest(7, 5);
        assert!(up.data.iter().all(|l| lab.data.contains(l)));
        assert_eq!(lab.resize_nearest(3, 2), lab);
        let down = lab.resize_nearest(1, 1);
        assert_eq!(down.data, vec![4]);
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let lab = LabelMap::new(2, 1, vec![1, 255]).unwrap();
        assert!(lab.validate(2).is_ok());
        assert!(lab.validate(1).is_err());
    }
}
