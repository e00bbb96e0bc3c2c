//! Per-sample zero-mean / unit-variance normalization.
//!
//! Statistics are taken from the speckled observation and applied to both
//! members of a pair, since only the observation exists at inference time.

use crate::error::Result;
use crate::grid::ImageGrid;

/// Lower bound on the normalization standard deviation.
pub const EPS_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord {
    pub mean: f64,
    pub std: f64,
}

impl NormRecord {
    /// Population mean and standard deviation of `img`, std clamped to
    /// [`EPS_NORM`].
    pub fn of(img: &ImageGrid) -> Self {
        Self {
            mean: img.mean(),
            std: img.variance().sqrt().max(EPS_NORM),
        }
    }

    pub fn apply(&self, img: &ImageGrid) -> ImageGrid {
        let inv = 1.0 / self.std;
        img.map(|v| ((v as f64 - self.mean) * inv) as f32)
    }
}

pub fn normalize_pair(x0: &ImageGrid, mu: &ImageGrid) -> Result<(ImageGrid, ImageGrid, NormRecord)> {
    x0.ensure_same_shape(mu)?;
    let rec = NormRecord::of(mu);
    Ok((rec.apply(x0), rec.apply(mu), rec))
}

pub fn denormalize(img: &ImageGrid, rec: NormRecord) -> ImageGrid {
    img.map(|v| (v as f64 * rec.std + rec.mean) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_observation_is_clamped() {
        let mu = ImageGrid::filled(4, 4, 0.5);
        let (_, mun, rec) = normalize_pair(&mu, &mu).unwrap();
        assert_eq!(rec.mean, 0.5);
        assert_eq!(rec.std, EPS_NORM);
        assert!(mun.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_input_is_identity() {
        let mu = ImageGrid::from_fn(4, 4, |r, c| if (r + c) % 2 == 0 { 1.0 } else { -1.0 });
        let (_, mun, rec) = normalize_pair(&mu, &mu).unwrap();
        assert_eq!(rec.mean, 0.0);
        assert_eq!(rec.std, 1.0);
        assert_eq!(mun, mu);
    }

    #[test]
    fn checkerboard_statistics() {
        let mu = ImageGrid::from_fn(6, 6, |r, c| ((r + c) % 2) as f32);
        let x0 = ImageGrid::zeros(6, 6);
        let (x0n, mun, rec) = normalize_pair(&x0, &mu).unwrap();
        assert_eq!(rec.mean, 0.5);
        assert_eq!(rec.std, 0.5);
        assert!(mun.data().iter().all(|&v| v == -1.0 || v == 1.0));
        assert!(x0n.data().iter().all(|&v| v == -1.0));
        assert!(mun.mean().abs() < 1e-6);
        assert!((mun.variance() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(normalize_pair(&ImageGrid::zeros(2, 2), &ImageGrid::zeros(2, 3)).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let out = denormalize(&ImageGrid::zeros(2, 2), NormRecord { mean: 0.5, std: 0.25 });
        assert!(out.data().iter().all(|&v| v == 0.5));
        let out = denormalize(&ImageGrid::filled(2, 2, 1.0), NormRecord { mean: 0.2, std: 0.3 });
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    proptest! {
        // Intensities live in [0, 1]; the normalized image is stored as f32,
        // which bounds the error by f32 rounding of (v - mean).
        #[test]
        fn roundtrip(values in proptest::collection::vec(0.0f32..1.0, 16)) {
            let img = ImageGrid::new(4, 4, values).unwrap();
            prop_assume!(img.variance().sqrt() >= EPS_NORM);
            let rec = NormRecord::of(&img);
            let back = denormalize(&rec.apply(&img), rec);
            for (&a, &b) in img.data().iter().zip(back.data()) {
                prop_assert!(((a - b).abs() as f64) <= 1e-6 * (1.0 + a.abs() as f64), "{} vs {}", a, b);
            }
        }
    }
}
