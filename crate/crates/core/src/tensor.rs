//! Dense image storage shared by every stage of the pipeline.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Spatial and channel extent of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Single-channel square image.
    pub fn square(size: usize) -> Self {
        Self::new(size, size, 1)
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// An `H x W` grid of intensities with one or more channels.
///
/// Values are stored channel-major, then row-major (`c, y, x`). The same type
/// carries data images in `[0, 1]`, perturbed states, scores and conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
            return Err(Error::Domain(format!("image dimensions must be positive, got {shape}")));
        }
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {shape}", shape.len()),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(!shape.is_empty(), "image dimensions must be positive");
        Self {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self { shape, values }
    }

    /// i.i.d. standard normal entries.
    pub fn standard_normal<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let values = (0..shape.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape, values }
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let w = self.shape.width;
        let h = self.shape.height;
        self.values[(c * h + y) * w + x] = value;
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_string(),
                got: other.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        Ok(ImageTensor {
            shape: self.shape,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ImageTensor) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> ImageTensor {
        self.map(|v| alpha * v)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn mean_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> ImageTensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageTensor {
        let plane = self.shape.plane();
        ImageTensor {
            shape: Shape::new(self.shape.height, self.shape.width, 1),
            values: self.values[c * plane..(c + 1) * plane].to_vec(),
        }
    }

    /// Stacks images with equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&ImageTensor]) -> Result<ImageTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("cannot concatenate zero images".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        let mut values = Vec::new();
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::ShapeMismatch {
                    expected: format!("{h}x{w} spatial"),
                    got: format!("{}x{} spatial", p.height(), p.width()),
                });
            }
            channels += p.channels();
            values.extend_from_slice(&p.values);
        }
        Ok(ImageTensor {
            shape: Shape::new(h, w, channels),
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(ImageTensor::new(Shape::square(2), vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(Shape::new(0, 2, 1), vec![]).is_err());
    }

    #[test]
    fn indexing_is_channel_then_row_major() {
        let t = ImageTensor::from_fn(Shape::new(2, 3, 2), |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(t.values()[0..3], [0.0, 1.0, 2.0]);
        assert_eq!(t.get(1, 1, 2), 112.0);
        assert_eq!(t.channel(1).get(0, 0, 1), 101.0);
    }

    #[test]
    fn concat_checks_spatial_size() {
        let a = ImageTensor::zeros(Shape::square(4));
        let b = ImageTensor::filled(Shape::square(4), 1.0);
        let c = ImageTensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.channels(), 2);
        assert_eq!(c.channel(1), b);
        let d = ImageTensor::zeros(Shape::square(2));
        assert!(ImageTensor::concat_channels(&[&a, &d]).is_err());
    }
}
