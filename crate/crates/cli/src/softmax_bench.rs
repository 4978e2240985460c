//! SAS exponent against `exp` over a grid, plus a row-softmax comparison.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tqt_core::{MatrixF32, SasConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpSample {
    pub x: f32,
    pub sas_exp: f32,
    pub exp: f32,
    pub abs_err: f32,
}

/// `points` evenly spaced values from `lo` to `hi` inclusive.
pub fn exp_grid(lo: f32, hi: f32, points: usize, threshold: i32) -> Result<Vec<ExpSample>> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(CliError::validation(format!("bad grid [{lo}, {hi}]")));
    }
    if points < 2 {
        return Err(CliError::validation("grid needs at least 2 points"));
    }
    let sas = SasConfig::new(threshold)?;
    let step = (hi - lo) as f64 / (points - 1) as f64;
    Ok((0..points)
        .map(|i| {
            let x = (lo as f64 + step * i as f64) as f32;
            let (a, e) = (sas.exp(x), x.exp());
            ExpSample { x, sas_exp: a, exp: e, abs_err: (a - e).abs() }
        })
        .collect())
}

pub fn grid_csv(samples: &[ExpSample]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in samples {
        w.serialize(s)?;
    }
    crate::error::csv_string(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub rows: usize,
    pub len: usize,
    pub sigma: f32,
    pub threshold: i32,
    pub max_abs_err: f64,
    pub argmax_agreement: f64,
    /// Informational.
    pub elapsed_ms: f64,
}

/// Exact softmax of one row in f64.
pub fn exact_softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = row.iter().map(|&x| (x as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    (1..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}

/// `rows` random rows of `N(0, sigma)` entries through SAS softmax and the
/// exact softmax.
pub fn compare_rows(rows: usize, len: usize, sigma: f32, threshold: i32, seed: u64) -> Result<RowSummary> {
    if rows == 0 || len == 0 {
        return Err(CliError::validation("rows and len must be positive"));
    }
    let normal = Normal::new(0.0f32, sigma).map_err(|e| CliError::validation(format!("sigma {sigma}: {e}")))?;
    let sas = SasConfig::new(threshold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = MatrixF32::from_fn(rows, len, |_, _| normal.sample(&mut rng));
    let t0 = Instant::now();
    let approx = sas.softmax_rows(&scores);
    let elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
    let mut max_abs_err = 0.0f64;
    let mut agree = 0usize;
    for r in 0..rows {
        let exact = exact_softmax(scores.row(r));
        let a = approx.row(r);
        for (x, y) in a.iter().zip(&exact) {
            max_abs_err = max_abs_err.max((*x as f64 - y).abs());
        }
        agree += usize::from(argmax(a) == argmax(&exact));
    }
    Ok(RowSummary {
        rows,
        len,
        sigma,
        threshold,
        max_abs_err,
        argmax_agreement: agree as f64 / rows as f64,
        elapsed_ms,
    })
}
