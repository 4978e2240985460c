//! Parameter sweeps over one workload.

use clap::ValueEnum;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::run::{run, RunConfig};
use crate::selectors::Selector;
use crate::workload::Workload;

/// Draws averaged for the random selector.
pub const RANDOM_DRAWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Every `(B_r, B_c)` pair from the values.
    Block,
    /// Uniform cache width.
    Bits,
    /// Number of 2-bit heads, once per selector.
    Heads2bit,
    /// SAS threshold depth; values are magnitudes.
    Nr,
}

impl Axis {
    pub fn default_values(self, heads: usize) -> Vec<i64> {
        match self {
            Axis::Block => vec![32, 64, 128],
            Axis::Bits => vec![2, 4, 8],
            Axis::Heads2bit => (0..=heads as i64).collect(),
            Axis::Nr => (2..=10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub block_rows: usize,
    pub block_cols: usize,
    pub bits: u8,
    pub heads2bit: usize,
    pub threshold: i32,
    pub selector: Selector,
    /// Runs averaged into this row.
    pub draws: usize,
    pub prefill_rel: Option<f64>,
    pub readback_rel: Option<f64>,
    pub decode_rel: Option<f64>,
    pub compression_ratio: Option<f64>,
}

struct Point {
    config: RunConfig,
    seeds: Vec<u64>,
}

fn points(axis: Axis, values: &[i64], base: &RunConfig, heads: usize) -> Result<Vec<Point>> {
    let single = |config: RunConfig| Point { config, seeds: vec![base.selector_seed] };
    let mut out = Vec::new();
    match axis {
        Axis::Block => {
            let sizes = values
                .iter()
                .map(|&v| usize::try_from(v).ok().filter(|&v| v > 0).ok_or_else(|| CliError::validation(format!("block size {v}"))))
                .collect::<Result<Vec<_>>>()?;
            for &br in &sizes {
                for &bc in &sizes {
                    out.push(single(RunConfig { block_rows: br, block_cols: bc, ..base.clone() }));
                }
            }
        }
        Axis::Bits => {
            for &v in values {
                if ![2, 4, 8].contains(&v) {
                    return Err(CliError::validation(format!("cache width {v} is not 2, 4 or 8")));
                }
                // 4 means every head at 4 bits here.
                let config = RunConfig { bits: v as u8, heads2bit: Some(0), ..base.clone() };
                out.push(single(config));
            }
        }
        Axis::Heads2bit => {
            for &v in values {
                let n_h = usize::try_from(v).ok().filter(|&n| n <= heads).ok_or_else(|| {
                    CliError::validation(format!("heads2bit {v} outside 0..={heads}"))
                })?;
                for selector in Selector::ALL {
                    let config = RunConfig { bits: 4, heads2bit: Some(n_h), selector, ..base.clone() };
                    let seeds = if selector == Selector::Random {
                        (0..RANDOM_DRAWS as u64).map(|i| base.selector_seed.wrapping_add(i)).collect()
                    } else {
                        vec![base.selector_seed]
                    };
                    out.push(Point { config, seeds });
                }
            }
        }
        Axis::Nr => {
            for &v in values {
                let t = i32::try_from(v.unsigned_abs())
                    .ok()
                    .filter(|&t| t >= 1)
                    .ok_or_else(|| CliError::validation(format!("threshold {v}")))?;
                out.push(single(RunConfig { threshold: -t, ..base.clone() }));
            }
        }
    }
    Ok(out)
}

fn mean(xs: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn sweep(workload: &Workload, base: &RunConfig, axis: Axis, values: &[i64]) -> Result<Vec<SweepRow>> {
    let heads = workload.spec.heads;
    let pts = points(axis, values, base, heads)?;
    pts.par_iter()
        .map(|p| {
            let reports = p
                .seeds
                .iter()
                .map(|&s| run(workload, &RunConfig { selector_seed: s, ..p.config.clone() }))
                .collect::<Result<Vec<_>>>()?;
            let col = |f: &dyn Fn(&crate::run::RunReport) -> Option<f64>| mean(&reports.iter().map(f).collect::<Vec<_>>());
            let c = &p.config;
            Ok(SweepRow {
                axis,
                block_rows: c.block_rows,
                block_cols: c.block_cols,
                bits: c.bits,
                heads2bit: reports[0].plan.n_h,
                threshold: c.threshold,
                selector: c.selector,
                draws: reports.len(),
                prefill_rel: col(&|r| r.prefill.rel_frobenius),
                readback_rel: col(&|r| r.readback.rel_frobenius),
                decode_rel: col(&|r| r.mean_decode_error()),
                compression_ratio: col(&|r| r.cache.as_ref().and_then(|c| c.compression_ratio)),
            })
        })
        .collect()
}

pub fn to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    crate::error::csv_string(w)
}
