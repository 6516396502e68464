//! Dense `H×W×C` images with values in `[0, 1]`.
//!
//! Pixels are stored row-major with channels innermost, so the element for
//! `(row, col, channel)` lives at `(row * width + col) * channels + channel`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, checking the length and that every value is finite and in `[0, 1]`.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
            return Err(Error::input(format!("image dimensions must be positive, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::input(format!(
                "image {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        let image = Image { shape, data };
        image.validate()?;
        Ok(image)
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Image::new(shape, vec![value; shape.len()])
    }

    /// Builds an image from arbitrary reals by clamping into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn from_clamped(shape: Shape, mut data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite value at element {i}")));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Image::new(shape, data)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::input(format!("non-finite pixel at element {i}")));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::input(format!("pixel {v} at element {i} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.shape.width + col) * self.shape.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mean over channels for each pixel, row-major `H×W`.
    pub fn luminance(&self) -> Vec<f64> {
        let c = self.shape.channels;
        self.data
            .chunks_exact(c)
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect()
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::input(format!(
                "shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_non_finite() {
        let s = Shape::new(1, 2, 1);
        assert!(Image::new(s, vec![0.0, 1.5]).is_err());
        assert!(Image::new(s, vec![0.0, f64::NAN]).is_err());
        assert!(Image::new(s, vec![0.0]).is_err());
        assert!(Image::new(Shape::new(0, 2, 1), vec![]).is_err());
        assert!(Image::from_clamped(s, vec![-1.0, 2.0]).unwrap().data() == [0.0, 1.0]);
    }

    #[test]
    fn channel_layout_is_innermost() {
        let s = Shape::new(2, 2, 3);
        let data: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let img = Image::new(s, data).unwrap();
        assert_eq!(img.index(1, 0, 2), 8);
        assert_eq!(img.get(0, 1, 0), 3.0 / 11.0);
        assert_eq!(img.luminance().len(), 4);
    }
}
