//! Attention kernels and their oracles.
//!
//! - [`reference_attention`]: dense softmax attention in FP64.
//! - [`exact_tiled_attention`]: online-softmax tiling with exact `exp`.
//! - [`turbo_prefill_head`] / [`turbo_decode`]: the quantized tiled kernels.
//!   Tiles of Q, K and V are quantized to INT8 with one scale per tile, scores
//!   come from integer dot products, the online-softmax exponentials use
//!   [`SasConfig::exp`], and the probability tile is re-quantized to INT8
//!   before the integer `P V` product. Prefill writes K/V tiles into a
//!   [`crate::kv_cache::KvCacheHead`]; decode reads them back through INT8.

mod reference;
mod turbo;

pub use reference::{exact_tiled_attention, reference_attention};
pub use turbo::{
    decode_attend, decode_attend_rows, turbo_decode, turbo_prefill, turbo_prefill_head,
    turbo_prefill_head_traced, TileTrace,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sas::{SasConfig, DEFAULT_THRESHOLD};
use crate::tensor::MatrixF32;

/// Which exponential the online softmax uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpMode {
    /// Lookup table times cubic, thresholded at `threshold`.
    Sas,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Query rows per tile (`B_r`).
    pub block_rows: usize,
    /// Key/value rows per tile (`B_c`).
    pub block_cols: usize,
    /// Decode buffer capacity (`n_b`).
    pub buffer_size: usize,
    /// SAS threshold (`n_r`).
    pub threshold: i32,
    pub head_dim: usize,
    pub causal: bool,
    pub exp: ExpMode,
    /// Quantize Q/K/V and probability tiles to INT8. When off, the tiled
    /// kernels run in FP32 on the same tiling.
    pub quantize: bool,
}

impl AttentionConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            block_rows: 64,
            block_cols: 64,
            buffer_size: 64,
            threshold: DEFAULT_THRESHOLD,
            head_dim,
            causal: false,
            exp: ExpMode::Sas,
            quantize: true,
        }
    }

    pub fn with_blocks(mut self, block_rows: usize, block_cols: usize) -> Self {
        self.block_rows = block_rows;
        self.block_cols = block_cols;
        self
    }

    /// `1 / sqrt(head_dim)`.
    pub fn scale_qk(&self) -> f32 {
        (1.0 / (self.head_dim as f64).sqrt()) as f32
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_rows == 0 || self.block_cols == 0 || self.buffer_size == 0 {
            return Err(Error::validation("block sizes and buffer size must be at least 1"));
        }
        if self.threshold > -1 {
            return Err(Error::validation(format!("threshold must be <= -1, got {}", self.threshold)));
        }
        if self.head_dim == 0 {
            return Err(Error::validation("head dim must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn sas(&self) -> Result<SasConfig> {
        SasConfig::new(self.threshold)
    }
}

/// Per-head query, key and value matrices (`tokens x head_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInput {
    pub q: MatrixF32,
    pub k: MatrixF32,
    pub v: MatrixF32,
}

impl HeadInput {
    pub fn new(q: MatrixF32, k: MatrixF32, v: MatrixF32) -> Self {
        Self { q, k, v }
    }
}

/// Attention output rows and the per-row logsumexp.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub out: MatrixF32,
    pub lse: Vec<f32>,
}

fn check_shapes(q: &MatrixF32, k: &MatrixF32, v: &MatrixF32) -> Result<()> {
    if q.cols() != k.cols() || k.cols() != v.cols() {
        return Err(Error::shape(format!(
            "head dims differ: q {}, k {}, v {}",
            q.cols(),
            k.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(format!("{} keys but {} values", k.rows(), v.rows())));
    }
    if k.rows() == 0 && q.rows() > 0 {
        return Err(Error::validation("attention over an empty key set"));
    }
    Ok(())
}

/// Key index limit (exclusive) for query row `i` under bottom-right causal
/// alignment.
#[inline]
pub(crate) fn causal_limit(i: usize, n_q: usize, n_k: usize) -> usize {
    (i + 1 + n_k).saturating_sub(n_q).min(n_k)
}

/// Error of `a` against the reference `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// `‖a − b‖_F / ‖b‖_F`; `None` when `b` is zero.
    pub rel_frobenius: Option<f64>,
    pub max_abs: f64,
    /// Cosine similarity per row; 1 when both rows are zero, 0 when only one is.
    pub cosine_per_row: Vec<f64>,
}

impl ErrorMetrics {
    pub fn mean_cosine(&self) -> Option<f64> {
        (!self.cosine_per_row.is_empty())
            .then(|| self.cosine_per_row.iter().sum::<f64>() / self.cosine_per_row.len() as f64)
    }
}

pub fn error_metrics(a: &MatrixF32, b: &MatrixF32) -> Result<ErrorMetrics> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("comparing {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut diff2 = 0f64;
    let mut ref2 = 0f64;
    let mut max_abs = 0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        diff2 += d * d;
        ref2 += (y as f64) * (y as f64);
        max_abs = max_abs.max(d.abs());
    }
    let cosine_per_row = (0..a.rows())
        .map(|r| {
            let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
            for (&x, &y) in a.row(r).iter().zip(b.row(r)) {
                dot += x as f64 * y as f64;
                na += x as f64 * x as f64;
                nb += y as f64 * y as f64;
            }
            match (na > 0.0, nb > 0.0) {
                (true, true) => dot / (na.sqrt() * nb.sqrt()),
                (false, false) => 1.0,
                _ => 0.0,
            }
        })
        .collect();
    Ok(ErrorMetrics {
        rel_frobenius: (ref2 > 0.0).then(|| (diff2 / ref2).sqrt()),
        max_abs,
        cosine_per_row,
    })
}

/// Concatenates per-head outputs column-wise (`N x H*d`).
pub fn concat_heads(outputs: &[AttentionOutput]) -> Result<MatrixF32> {
    let parts: Vec<MatrixF32> = outputs.iter().map(|o| o.out.clone()).collect();
    MatrixF32::hstack(&parts)
}
