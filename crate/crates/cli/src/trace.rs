//! Per-tile dumps of the online recurrence for one head.
//!
//! TQT1 files hold finite values only, so masked scores and empty running
//! maxima are written as `f32::MIN`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tqt_core::io::{save_tensor, Tensor};
use tqt_core::kv_cache::CacheBits;
use tqt_core::attention::{turbo_prefill_head_traced, TileTrace};
use tqt_core::MatrixF32;

use crate::error::{CliError, Result};
use crate::run::RunConfig;
use crate::workload::{write_json, Workload, MANIFEST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileFiles {
    pub row_tile: usize,
    pub col_tile: usize,
    pub m: String,
    pub l: String,
    pub scores: String,
    pub probs: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub head: usize,
    pub bits: u8,
    pub config: RunConfig,
    /// Stand-in for `-inf` in the dumped tensors.
    pub masked_value: f32,
    pub output: String,
    pub tiles: Vec<TileFiles>,
}

fn finite(m: &MatrixF32) -> MatrixF32 {
    let data = m.data().iter().map(|&x| if x.is_finite() { x } else { f32::MIN }).collect();
    MatrixF32::new(m.rows(), m.cols(), data).expect("same shape")
}

fn vector(v: &[f32]) -> MatrixF32 {
    finite(&MatrixF32::new(1, v.len(), v.to_vec()).expect("row shape"))
}

/// Prefill of `head` with tile tracing; writes the dumps into `out`.
pub fn trace(workload: &Workload, config: &RunConfig, head: usize, out: &Path) -> Result<TraceManifest> {
    let heads = workload.prefill();
    let input = heads.get(head).ok_or_else(|| {
        CliError::validation(format!("head {head} out of range for {} heads", heads.len()))
    })?;
    let plan = config.plan(workload, &heads)?;
    let bits = plan.bits[head];
    let cfg = config.attention(workload.spec.d)?;
    let mut steps: Vec<TileTrace> = Vec::new();
    let (output, _) = turbo_prefill_head_traced(input, &cfg, CacheBits::from_bits(bits)?, &mut steps)?;

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let save = |name: String, m: &MatrixF32| -> Result<String> {
        save_tensor(out.join(&name), &Tensor::from(m.clone()))?;
        Ok(name)
    };
    let mut tiles = Vec::with_capacity(steps.len());
    for t in &steps {
        let stem = format!("tile_r{}_c{}", t.row_tile, t.col_tile);
        tiles.push(TileFiles {
            row_tile: t.row_tile,
            col_tile: t.col_tile,
            m: save(format!("{stem}_m.tqt"), &vector(&t.m))?,
            l: save(format!("{stem}_l.tqt"), &vector(&t.l))?,
            scores: save(format!("{stem}_s.tqt"), &finite(&t.scores))?,
            probs: save(format!("{stem}_p.tqt"), &finite(&t.probs))?,
        });
    }
    let manifest = TraceManifest {
        head,
        bits,
        config: config.clone(),
        masked_value: f32::MIN,
        output: save("output.tqt".into(), &output.out)?,
        tiles,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}
