//! Head-wise precision planning.
//!
//! Each head gets `priority = gap * std`, where `gap` is the global value
//! range of the head and `std` is the population standard deviation of its
//! per-channel ranges. The `n_h` lowest-priority heads are stored at 2 bits,
//! the rest at 4 bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::MatrixF32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub head_index: usize,
    pub gap: f32,
    pub channel_gaps: Vec<f32>,
    pub std: f32,
    pub priority: f32,
}

/// Statistics of one head's `tokens x channels` matrix.
pub fn head_stats(head_index: usize, head_kv: &MatrixF32) -> Result<HeadStats> {
    if head_kv.is_empty() {
        return Err(Error::validation("head statistics need a non-empty matrix"));
    }
    let cols = head_kv.cols();
    let mut lo = vec![f32::INFINITY; cols];
    let mut hi = vec![f32::NEG_INFINITY; cols];
    for r in 0..head_kv.rows() {
        for (c, &v) in head_kv.row(r).iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    let global_lo = lo.iter().copied().fold(f32::INFINITY, f32::min);
    let global_hi = hi.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let gap = global_hi - global_lo;
    let channel_gaps: Vec<f32> = hi.iter().zip(&lo).map(|(h, l)| h - l).collect();

    let n = cols as f64;
    let mean = channel_gaps.iter().map(|&g| g as f64).sum::<f64>() / n;
    let var = channel_gaps.iter().map(|&g| (g as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() as f32;
    Ok(HeadStats { head_index, gap, channel_gaps, std, priority: gap * std })
}

/// Statistics over a head's keys and values together (rows of both).
pub fn head_stats_kv(head_index: usize, k: &MatrixF32, v: &MatrixF32) -> Result<HeadStats> {
    head_stats(head_index, &k.vstack(v)?)
}

/// Per-head storage widths; serializes as `{"n_h": k, "bits": [..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPrecisionPlan {
    pub n_h: usize,
    pub bits: Vec<u8>,
}

impl HeadPrecisionPlan {
    /// Every head at the same width (2, 4, or 8 for no stage-two compression).
    pub fn uniform(heads: usize, bits: u8) -> Self {
        Self { n_h: if bits == 2 { heads } else { 0 }, bits: vec![bits; heads] }
    }

    /// The `n_h` heads with the lowest score get 2 bits, ties to the lower
    /// index; every other head gets `high_bits`.
    pub fn from_scores(scores: &[f32], n_h: usize, high_bits: u8) -> Result<Self> {
        if n_h > scores.len() {
            return Err(Error::validation(format!(
                "cannot assign 2 bits to {n_h} of {} heads",
                scores.len()
            )));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut bits = vec![high_bits; scores.len()];
        for &h in &order[..n_h] {
            bits[h] = 2;
        }
        Ok(Self { n_h, bits })
    }

    pub fn heads(&self) -> usize {
        self.bits.len()
    }

    pub fn low_bit_heads(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 2).map(|(h, _)| h).collect()
    }
}

pub fn plan_precision(stats: &[HeadStats], n_h: usize) -> Result<HeadPrecisionPlan> {
    let mut scores = vec![0.0f32; stats.len()];
    for s in stats {
        let slot = scores
            .get_mut(s.head_index)
            .ok_or(Error::Bounds { index: s.head_index, len: stats.len() })?;
        *slot = s.priority;
    }
    HeadPrecisionPlan::from_scores(&scores, n_h, 4)
}
