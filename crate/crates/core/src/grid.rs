//! Two-dimensional scalar images and binary masks.
//!
//! Pixel values are stored as `f32`, row-major. Every reduction (sum, mean,
//! variance) accumulates in `f64`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pixel at index {i}")));
        }
        Ok(Self { height, width, data })
    }

    /// Panics on zero dimensions.
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    /// Builds from `f64` values, rounding to `f32`.
    pub fn from_f64(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| v as f32).collect())
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ImageGrid, mut f: impl FnMut(f32, f32) -> f32) -> Result<ImageGrid> {
        self.ensure_same_shape(other)?;
        Ok(ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> ImageGrid {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Bilinear sample at continuous pixel coordinates, where integer
    /// coordinates are pixel centres. Clamps at the borders.
    pub fn bilinear(&self, row: f64, col: f64) -> f64 {
        let r = row.clamp(0.0, (self.height - 1) as f64);
        let c = col.clamp(0.0, (self.width - 1) as f64);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let v00 = self.get(r0, c0) as f64;
        let v01 = self.get(r0, c1) as f64;
        let v10 = self.get(r1, c0) as f64;
        let v11 = self.get(r1, c1) as f64;
        (v00 * (1.0 - fc) + v01 * fc) * (1.0 - fr) + (v10 * (1.0 - fc) + v11 * fc) * fr
    }
}

/// Binary mask with the same row-major layout as [`ImageGrid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {} bits does not fit {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self { height, width, bits }
    }

    /// Pixels strictly above `threshold` are foreground.
    pub fn from_grid(grid: &ImageGrid, threshold: f32) -> Self {
        Self {
            height: grid.height(),
            width: grid.width(),
            bits: grid.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn to_grid(&self) -> ImageGrid {
        ImageGrid::from_fn(self.height, self.width, |r, c| if self.get(r, c) { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !(a && b))
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        }
    }

    /// Values of `img` under the mask, in row-major order.
    pub fn select(&self, img: &ImageGrid) -> Result<Vec<f64>> {
        if img.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: img.shape(),
            });
        }
        Ok(img
            .data()
            .iter()
            .zip(&self.bits)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| v as f64)
            .collect())
    }

    /// Inclusive row span of the foreground, `None` for an empty mask.
    pub fn row_span(&self) -> Option<(usize, usize)> {
        let rows: Vec<usize> = (0..self.height)
            .filter(|&r| (0..self.width).any(|c| self.get(r, c)))
            .collect();
        Some((*rows.first()?, *rows.last()?))
    }

    pub fn square(&self, row: usize, col: usize, side: usize) -> Mask {
        Mask::from_fn(self.height, self.width, |r, c| {
            r >= row && r < row + side && c >= col && c < col + side
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(ImageGrid::new(0, 3, vec![]).is_err());
        assert!(ImageGrid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(ImageGrid::new(1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn stats_accumulate_in_f64() {
        let img = ImageGrid::from_fn(2, 2, |r, c| ((r + c) % 2) as f32);
        assert_eq!(img.mean(), 0.5);
        assert_eq!(img.variance(), 0.25);
    }

    #[test]
    fn bilinear_hits_centres_and_midpoints() {
        let img = ImageGrid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(img.bilinear(0.0, 1.0), 1.0);
        assert_eq!(img.bilinear(0.5, 0.5), 1.5);
        assert_eq!(img.bilinear(-4.0, 9.0), 1.0);
    }

    #[test]
    fn mask_row_span() {
        let mut m = Mask::empty(5, 5);
        assert_eq!(m.row_span(), None);
        m.set(1, 2, true);
        m.set(3, 0, true);
        assert_eq!(m.row_span(), Some((1, 3)));
        assert_eq!(m.count(), 2);
    }
}
