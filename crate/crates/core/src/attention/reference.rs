use super::{causal_limit, check_shapes, AttentionConfig, AttentionOutput};
use crate::error::Result;
use crate::tensor::MatrixF32;

/// Dense `softmax(Q K^T / sqrt(d)) V` in FP64, rounded to FP32 at the end.
pub fn reference_attention(q: &MatrixF32, k: &MatrixF32, v: &MatrixF32, causal: bool) -> Result<AttentionOutput> {
    check_shapes(q, k, v)?;
    let (n_q, n_k, d) = (q.rows(), k.rows(), q.cols());
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = MatrixF32::zeros(n_q, d);
    let mut lse = Vec::with_capacity(n_q);
    let mut scores = vec![0f64; n_k];
    let mut acc = vec![0f64; d];
    for i in 0..n_q {
        let limit = if causal { causal_limit(i, n_q, n_k) } else { n_k };
        for (j, s) in scores[..limit].iter_mut().enumerate() {
            *s = q.row(i).iter().zip(k.row(j)).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
        }
        let max = scores[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0f64;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, &s) in scores[..limit].iter().enumerate() {
            let p = (s - max).exp();
            sum += p;
            for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                *a += p * x as f64;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = (a / sum) as f32;
        }
        lse.push((max + sum.ln()) as f32);
    }
    Ok(AttentionOutput { out, lse })
}

/// Online-softmax tiled attention with exact `exp`, no quantization.
///
/// Each query tile keeps a running row max `m`, running sum `l` and
/// unnormalized output; every key tile rescales them by `exp(m_prev - m_new)`.
pub fn exact_tiled_attention(
    q: &MatrixF32,
    k: &MatrixF32,
    v: &MatrixF32,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    check_shapes(q, k, v)?;
    cfg.validate()?;
    let (n_q, n_k, d) = (q.rows(), k.rows(), q.cols());
    let scale = (1.0 / (d as f64).sqrt()) as f32;
    let mut out = MatrixF32::zeros(n_q, d);
    let mut lse = vec![0f32; n_q];

    for row_start in (0..n_q).step_by(cfg.block_rows) {
        let row_end = (row_start + cfg.block_rows).min(n_q);
        let rows = row_end - row_start;
        let mut m = vec![f32::NEG_INFINITY; rows];
        let mut l = vec![0f32; rows];
        let mut acc = vec![0f32; rows * d];
        let mut s = vec![0f32; cfg.block_cols];

        for col_start in (0..n_k).step_by(cfg.block_cols) {
            let col_end = (col_start + cfg.block_cols).min(n_k);
            if cfg.causal && col_start >= causal_limit(row_end - 1, n_q, n_k) {
                break;
            }
            for r in 0..rows {
                let i = row_start + r;
                let limit = if cfg.causal { causal_limit(i, n_q, n_k) } else { n_k };
                let qi = q.row(i);
                for (c, slot) in s.iter_mut().enumerate() {
                    let j = col_start + c;
                    *slot = if j < col_end && j < limit {
                        qi.iter().zip(k.row(j)).map(|(&a, &b)| a * b).sum::<f32>() * scale
                    } else {
                        f32::NEG_INFINITY
                    };
                }
                let tile_max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let m_new = m[r].max(tile_max);
                if m_new == f32::NEG_INFINITY {
                    continue;
                }
                let alpha = if m[r] == f32::NEG_INFINITY { 0.0 } else { (m[r] - m_new).exp() };
                let a = &mut acc[r * d..(r + 1) * d];
                a.iter_mut().for_each(|x| *x *= alpha);
                let mut rowsum = 0f32;
                for (c, &sc) in s.iter().enumerate().take(col_end - col_start) {
                    let p = (sc - m_new).exp();
                    if p == 0.0 {
                        continue;
                    }
                    rowsum += p;
                    for (x, &vv) in a.iter_mut().zip(v.row(col_start + c)) {
                        *x += p * vv;
                    }
                }
                l[r] = alpha * l[r] + rowsum;
                m[r] = m_new;
            }
        }
        for r in 0..rows {
            for (o, &a) in out.row_mut(row_start + r).iter_mut().zip(&acc[r * d..(r + 1) * d]) {
                *o = a / l[r];
            }
            lse[row_start + r] = m[r] + l[r].ln();
        }
    }
    Ok(AttentionOutput { out, lse })
}
