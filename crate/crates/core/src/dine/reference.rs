use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::RngStream;

/// Axis-aligned box supporting the uniform reference measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub margin: f64,
}

impl ReferenceBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, margin: f64) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::LengthMismatch {
                context: "reference box bounds",
                left: lo.len(),
                right: hi.len(),
            });
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidParameter(format!("reference box requires lo < hi, got {lo:?} / {hi:?}")));
        }
        Ok(Self { lo, hi, margin })
    }

    /// Per-dimension min/max of `samples` (rows), widened by `margin` times
    /// the range on each side. Dimensions with zero range are widened by
    /// `floor` instead.
    pub fn fit(samples: ArrayView2<f64>, margin: f64, floor: f64) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::Empty("reference fit"));
        }
        if !(margin >= 0.0) || !(floor > 0.0) {
            return Err(Error::InvalidParameter(format!("margin {margin} / floor {floor}")));
        }
        let mut lo = Vec::with_capacity(samples.ncols());
        let mut hi = Vec::with_capacity(samples.ncols());
        for col in samples.columns() {
            let (mn, mx) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if !mn.is_finite() || !mx.is_finite() {
                return Err(Error::NonFinite("reference fit samples".into()));
            }
            let range = mx - mn;
            if range > 0.0 {
                lo.push(mn - margin * range);
                hi.push(mx + margin * range);
            } else {
                lo.push(mn - floor);
                hi.push(mx + floor);
            }
        }
        Self::new(lo, hi, margin)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    /// Log-volume of the box; the reference density is `exp(-log_volume)`.
    pub fn log_volume(&self) -> f64 {
        self.widths().iter().map(|w| w.ln()).sum()
    }

    /// Same centre, every side scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| {
                let c = 0.5 * (l + h);
                let half = 0.5 * (h - l) * factor;
                (c - half, c + half)
            })
            .unzip();
        Self::new(lo, hi, self.margin)
    }

    /// One i.i.d. uniform draw per `(t, b)` position, shaped `(T, batch, dim)`.
    pub fn sample(&self, len: usize, batch: usize, rng: &mut RngStream) -> Array3<f64> {
        let d = self.dim();
        let mut out = Array3::zeros((len, batch, d));
        for (i, v) in out.iter_mut().enumerate() {
            let k = i % d;
            *v = rng.uniform_range(self.lo[k], self.hi[k]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn fit_without_margin() {
        let b = ReferenceBox::fit(array![[-1.0], [0.0], [2.0]].view(), 0.0, 0.1).unwrap();
        assert_eq!((b.lo[0], b.hi[0]), (-1.0, 2.0));
    }

    #[test]
    fn fit_with_margin() {
        let b = ReferenceBox::fit(array![[-1.0], [0.0], [2.0]].view(), 0.05, 0.1).unwrap();
        assert!((b.lo[0] + 1.15).abs() < 1e-12 && (b.hi[0] - 2.15).abs() < 1e-12, "{b:?}");
    }

    #[test]
    fn degenerate_dimension_uses_floor() {
        let b = ReferenceBox::fit(Array2::zeros((10, 1)).view(), 0.05, 0.1).unwrap();
        assert_eq!((b.lo[0], b.hi[0]), (-0.1, 0.1));
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(ReferenceBox::fit(Array2::zeros((0, 1)).view(), 0.05, 0.1).is_err());
    }

    #[test]
    fn uniform_mean_is_centred() {
        let b = ReferenceBox::new(vec![0.0], vec![1.0], 0.0).unwrap();
        let n = 200_000;
        let s = b.sample(n, 1, &mut RngStream::new(4));
        let mean = s.mean().unwrap();
        let sigma = (1.0 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "{mean}");
    }

    #[test]
    fn narrow_box_contains_draws() {
        let b = ReferenceBox::new(vec![2.0], vec![2.0 + 1e-9], 0.0).unwrap();
        let s = b.sample(100, 10, &mut RngStream::new(5));
        assert!(s.iter().all(|&v| (2.0..=2.0 + 1e-9).contains(&v)));
    }

    #[test]
    fn seeded_draws_repeat() {
        let b = ReferenceBox::new(vec![-1.0, 0.0], vec![1.0, 3.0], 0.0).unwrap();
        let a = b.sample(7, 3, &mut RngStream::new(9));
        let c = b.sample(7, 3, &mut RngStream::new(9));
        assert_eq!(a, c);
    }
}
