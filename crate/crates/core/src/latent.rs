//! Latent tensors of shape `(channels, h, w)`.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

/// Channel-major latent with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("latent shape ({channels},{h},{w}) has a zero dimension")));
        }
        if data.len() != channels * h * w {
            return Err(Error::invalid(format!(
                "latent data length {} does not match shape ({channels},{h},{w})",
                data.len()
            )));
        }
        Ok(Self { channels, h, w, data })
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn check_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise `a*self + b*other`.
    pub fn lincomb(&self, a: f64, other: &LatentTensor, b: f64) -> LatentTensor {
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
    }

    fn with_data(&self, data: Vec<f64>) -> LatentTensor {
        LatentTensor {
            channels: self.channels,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentTensor {
        self.with_data(self.data.iter().map(|v| f(*v)).collect())
    }

    /// Stacks a batch as `[batch*h*w, channels]` rows (one row per position).
    pub fn to_rows(batch: &[LatentTensor]) -> Mat {
        let (c, h, w) = batch[0].shape();
        let hw = h * w;
        Mat::from_shape_fn((batch.len() * hw, c), |(r, ch)| {
            let (b, p) = (r / hw, r % hw);
            batch[b].data[ch * hw + p]
        })
    }

    /// Inverse of [`LatentTensor::to_rows`].
    pub fn from_rows(rows: &Mat, h: usize, w: usize) -> Vec<LatentTensor> {
        let hw = h * w;
        let c = rows.ncols();
        (0..rows.nrows() / hw)
            .map(|b| LatentTensor {
                channels: c,
                h,
                w,
                data: (0..c * hw).map(|i| rows[[b * hw + i % hw, i / hw]]).collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let a = LatentTensor::new(3, 2, 2, (0..12).map(|v| v as f64).collect()).unwrap();
        let b = a.map(|v| -v);
        let rows = LatentTensor::to_rows(&[a.clone(), b.clone()]);
        assert_eq!(rows.dim(), (8, 3));
        assert_eq!(rows[[1, 2]], a.get(2, 0, 1));
        assert_eq!(LatentTensor::from_rows(&rows, 2, 2), vec![a, b]);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(LatentTensor::new(1, 0, 8, vec![]).is_err());
    }
}
