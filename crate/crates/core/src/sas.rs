//! Sparse activated softmax.
//!
//! `exp(x)` for `x <= 0` is computed as `lut[floor(-x)] * poly(frac(-x))`,
//! where `lut[i] = e^-i` and `poly` is a fixed cubic fit of `e^-f` on
//! `[0, 1)`. Inputs below the integer threshold `n_r` map to a sentinel table
//! slot holding 0, which is where the sparsity comes from.

use crate::error::{Error, Result};
use crate::tensor::MatrixF32;

/// Cubic coefficients, highest degree first: `c3 f^3 + c2 f^2 + c1 f + c0`.
pub const POLY_COEFFS: [f32; 4] = [-0.1025, 0.4626, -0.9922, 0.9996];

/// Default threshold.
pub const DEFAULT_THRESHOLD: i32 = -6;

#[derive(Debug, Clone, PartialEq)]
pub struct SasConfig {
    threshold: i32,
    lut: Vec<f32>,
    poly: [f32; 4],
}

impl Default for SasConfig {
    fn default() -> Self {
        Self::new(DEFAULT_THRESHOLD).expect("default threshold is valid")
    }
}

impl SasConfig {
    /// Builds the table `[1, e^-1, ..., e^n_r, 0]` of length `|n_r| + 2`.
    pub fn new(threshold: i32) -> Result<Self> {
        if threshold >= 0 {
            return Err(Error::validation(format!("threshold must be negative, got {threshold}")));
        }
        let depth = threshold.unsigned_abs() as usize;
        let mut lut: Vec<f32> = (0..=depth).map(|i| (-(i as f64)).exp() as f32).collect();
        lut.push(0.0);
        Ok(Self { threshold, lut, poly: POLY_COEFFS })
    }

    pub fn threshold(&self) -> i32 {
        self.threshold
    }

    pub fn lut(&self) -> &[f32] {
        &self.lut
    }

    pub fn poly(&self) -> [f32; 4] {
        self.poly
    }

    fn sentinel(&self) -> usize {
        self.lut.len() - 1
    }

    /// Approximates `e^-f` for `f` in `[0, 1)` by Horner evaluation.
    #[inline]
    pub fn poly_eval(&self, f: f32) -> f32 {
        let [c3, c2, c1, c0] = self.poly;
        ((c3 * f + c2) * f + c1) * f + c0
    }

    /// Approximates `e^x` for `x <= 0`; returns 0 below the threshold.
    ///
    /// # Panics
    ///
    /// If `x` is positive or NaN.
    #[inline]
    pub fn exp(&self, x: f32) -> f32 {
        assert!(x <= 0.0, "sas exp expects a non-positive argument, got {x}");
        let (idx, frac) = if x < self.threshold as f32 {
            (self.sentinel(), 0.0)
        } else {
            let neg = -x;
            let whole = neg.floor();
            (whole as usize, neg - whole)
        };
        self.lut[idx] * self.poly_eval(frac)
    }

    /// Row-wise softmax: shift by the row max, approximate exp, normalize.
    pub fn softmax_rows(&self, scores: &MatrixF32) -> MatrixF32 {
        let mut out = scores.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for v in row.iter_mut() {
                *v = self.exp(*v - max);
            }
            let sum: f32 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }
}

/// Builds the lookup table for threshold `n_r`.
pub fn build_lut(threshold: i32) -> Result<SasConfig> {
    SasConfig::new(threshold)
}

/// Panics if `f` is outside `[0, 1)`.
pub fn poly_eval(f: f32) -> f32 {
    assert!((0.0..1.0).contains(&f), "fraction {f} outside [0, 1)");
    SasConfig::default().poly_eval(f)
}

pub fn sas_exp(x: f32, cfg: &SasConfig) -> f32 {
    cfg.exp(x)
}

pub fn sas_softmax_rows(scores: &MatrixF32, cfg: &SasConfig) -> MatrixF32 {
    cfg.softmax_rows(scores)
}
