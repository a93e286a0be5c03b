//! Channel-major feature grids.
//!
//! [`FeatureGrid`] is the one carrier type for pixel data and latent data
//! alike: a `(channels, height, width)` array of `f64`, optionally tagged
//! with the declared value range (pixel grids are normalized to `[-1, 1]`).

use ndarray::{Array3, ArrayView3};

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    values: Array3<f64>,
    value_range: Option<(f64, f64)>,
}

impl FeatureGrid {
    /// Wraps a `(channels, height, width)` array, rejecting empty axes and
    /// non-finite entries.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        Self::with_range(values, None)
    }

    pub fn with_range(values: Array3<f64>, value_range: Option<(f64, f64)>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c < 1 || h < 1 || w < 1 {
            return config_err(format!("grid axes must be >= 1, got {c}x{h}x{w}"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("grid contains non-finite values".into()));
        }
        if let Some((lo, hi)) = value_range {
            if !(lo < hi) {
                return config_err(format!("invalid value range [{lo}, {hi}]"));
            }
        }
        Ok(Self { values, value_range })
    }

    /// A grid filled with one value.
    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn values(&self) -> ArrayView3<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn value_range(&self) -> Option<(f64, f64)> {
        self.value_range
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Checks that this grid is a normalized image: 3 channels, declared or
    /// actual values inside `[-1, 1]`.
    pub fn expect_image(&self, expected_size: Option<usize>) -> Result<()> {
        if self.channels() != 3 {
            return config_err(format!("expected 3-channel image, got {}", self.channels()));
        }
        if let Some(s) = expected_size {
            if self.height() != s || self.width() != s {
                return config_err(format!(
                    "expected {s}x{s} image, got {}x{}",
                    self.height(),
                    self.width()
                ));
            }
        }
        let (lo, hi) = self.value_range.unwrap_or((-1.0, 1.0));
        if lo < -1.0 - 1e-9 || hi > 1.0 + 1e-9 {
            return config_err(format!("image range [{lo}, {hi}] exceeds [-1, 1]"));
        }
        Ok(())
    }

    /// Squared Frobenius norm of all entries.
    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Mean squared difference against another grid of the same shape.
    pub fn mean_sq_diff(&self, other: &FeatureGrid) -> Result<f64> {
        if self.shape() != other.shape() {
            return config_err(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let n = self.values.len() as f64;
        let sum: f64 = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }
}
