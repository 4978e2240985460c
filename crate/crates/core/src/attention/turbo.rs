use super::{causal_limit, check_shapes, AttentionConfig, AttentionOutput, ExpMode, HeadInput};
use crate::error::{Error, Result};
use crate::kv_cache::{universal_scale, CacheBits, CacheBlock, KvCacheHead, Which};
use crate::planner::HeadPrecisionPlan;
use crate::quant::{self, QuantBlockQ1, SYM_LEVELS};
use crate::sas::SasConfig;
use crate::tensor::MatrixF32;

/// Snapshot of one `(row tile, key tile)` step of the online recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct TileTrace {
    pub row_tile: usize,
    pub col_tile: usize,
    /// Running max after this tile.
    pub m: Vec<f32>,
    /// Running sum after this tile.
    pub l: Vec<f32>,
    /// Scaled scores, masked entries at `-inf`.
    pub scores: MatrixF32,
    /// Unnormalized probabilities `exp(S - m)` before INT8 re-quantization.
    pub probs: MatrixF32,
}

/// A matrix tile either as stage-one codes or as plain FP32.
enum Operand {
    Int(QuantBlockQ1),
    Float(MatrixF32),
}

impl Operand {
    fn prepare(m: MatrixF32, quantize: bool) -> Result<Self> {
        if quantize {
            Ok(Operand::Int(quant::sym_quant_int8(&m)?))
        } else {
            Ok(Operand::Float(m))
        }
    }

    fn rows(&self) -> usize {
        match self {
            Operand::Int(q) => q.rows(),
            Operand::Float(m) => m.rows(),
        }
    }
}

enum Exp {
    Sas(SasConfig),
    Exact,
}

impl Exp {
    fn from_cfg(cfg: &AttentionConfig) -> Result<Self> {
        Ok(match cfg.exp {
            ExpMode::Sas => Exp::Sas(cfg.sas()?),
            ExpMode::Exact => Exp::Exact,
        })
    }

    #[inline]
    fn eval(&self, x: f32) -> f32 {
        match self {
            Exp::Sas(s) => s.exp(x),
            Exp::Exact => x.exp(),
        }
    }
}

/// `rows x cols` scores of `q * k^T * scale_qk`.
fn tile_scores(q: &Operand, k: &Operand, scale_qk: f32) -> Result<Vec<f32>> {
    match (q, k) {
        (Operand::Int(a), Operand::Int(b)) => {
            let s = a.scale * b.scale * scale_qk;
            Ok(quant::int_dot_nt(&a.codes, &b.codes)?.into_iter().map(|v| v as f32 * s).collect())
        }
        (Operand::Float(a), Operand::Float(b)) => {
            let mut out = Vec::with_capacity(a.rows() * b.rows());
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    out.push(a.row(i).iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum::<f32>() * scale_qk);
                }
            }
            Ok(out)
        }
        _ => Err(Error::validation("mixed quantized and float tiles")),
    }
}

/// Online-softmax state of one query tile.
struct RowTile {
    m: Vec<f32>,
    l: Vec<f32>,
    acc: Vec<f32>,
    d: usize,
}

impl RowTile {
    fn new(rows: usize, d: usize) -> Self {
        Self { m: vec![f32::NEG_INFINITY; rows], l: vec![0.0; rows], acc: vec![0.0; rows * d], d }
    }

    fn rows(&self) -> usize {
        self.m.len()
    }

    /// Folds one key tile into the state. `scores` is `rows x width`, with
    /// masked and padded entries at `-inf`; only the first `v.rows()` columns
    /// can be live.
    fn update(&mut self, scores: &[f32], width: usize, v: &Operand, exp: &Exp) -> Vec<f32> {
        let rows = self.rows();
        let live = v.rows();
        let mut probs = vec![0f32; rows * width];
        for r in 0..rows {
            let s = &scores[r * width..(r + 1) * width];
            let tile_max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let m_new = self.m[r].max(tile_max);
            if m_new == f32::NEG_INFINITY {
                continue;
            }
            let alpha = exp.eval(self.m[r] - m_new);
            let p = &mut probs[r * width..(r + 1) * width];
            let mut rowsum = 0f32;
            for (pv, &sv) in p.iter_mut().zip(s) {
                *pv = exp.eval(sv - m_new);
                rowsum += *pv;
            }
            self.l[r] = alpha * self.l[r] + rowsum;
            self.m[r] = m_new;
            self.acc[r * self.d..(r + 1) * self.d].iter_mut().for_each(|x| *x *= alpha);
        }

        match v {
            Operand::Int(vq) => {
                // P̃ re-quantized with one scale for the whole tile.
                let p_scale = quant::sym_scale(&probs);
                let lim = SYM_LEVELS as f32;
                let codes: Vec<i32> =
                    probs.iter().map(|&p| (p / p_scale).round().clamp(-lim, lim) as i32).collect();
                let s = p_scale * vq.scale;
                let mut col = vec![0i32; self.d];
                for r in 0..rows {
                    col.iter_mut().for_each(|c| *c = 0);
                    for (j, &pc) in codes[r * width..r * width + live].iter().enumerate() {
                        if pc == 0 {
                            continue;
                        }
                        for (c, &vc) in col.iter_mut().zip(vq.codes.row(j)) {
                            *c += pc * vc as i32;
                        }
                    }
                    for (a, &c) in self.acc[r * self.d..(r + 1) * self.d].iter_mut().zip(&col) {
                        *a += c as f32 * s;
                    }
                }
            }
            Operand::Float(vf) => {
                for r in 0..rows {
                    let a = &mut self.acc[r * self.d..(r + 1) * self.d];
                    for (j, &p) in probs[r * width..r * width + live].iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        for (x, &vv) in a.iter_mut().zip(vf.row(j)) {
                            *x += p * vv;
                        }
                    }
                }
            }
        }
        probs
    }

    fn finish(self, out: &mut MatrixF32, lse: &mut [f32], row_start: usize) {
        for r in 0..self.rows() {
            let inv = 1.0 / self.l[r];
            for (o, &a) in out.row_mut(row_start + r).iter_mut().zip(&self.acc[r * self.d..(r + 1) * self.d]) {
                *o = a * inv;
            }
            lse[row_start + r] = self.m[r] + self.l[r].ln();
        }
    }
}

/// Masking rule for a query tile against key positions.
#[derive(Clone, Copy)]
struct Mask {
    causal: bool,
    n_q: usize,
    n_k: usize,
}

impl Mask {
    fn limit(&self, i: usize) -> usize {
        if self.causal {
            causal_limit(i, self.n_q, self.n_k)
        } else {
            self.n_k
        }
    }
}

/// Runs one query tile over a sequence of key/value tiles.
#[allow(clippy::too_many_arguments)]
fn attend_row_tile<'a>(
    q: &Operand,
    row_start: usize,
    kv: impl Iterator<Item = (usize, &'a Operand, &'a Operand)>,
    mask: Mask,
    cfg: &AttentionConfig,
    exp: &Exp,
    row_tile: usize,
    mut trace: Option<&mut Vec<TileTrace>>,
) -> Result<RowTile> {
    let rows = q.rows();
    let width = cfg.block_cols;
    let scale_qk = cfg.scale_qk();
    let mut state = RowTile::new(rows, cfg.head_dim);
    let mut scores = vec![f32::NEG_INFINITY; rows * width];
    let last_limit = mask.limit(row_start + rows - 1);
    for (col_tile, (col_start, k, v)) in kv.enumerate() {
        if col_start >= last_limit {
            break;
        }
        let live = k.rows();
        let raw = tile_scores(q, k, scale_qk)?;
        for r in 0..rows {
            let limit = mask.limit(row_start + r);
            let dst = &mut scores[r * width..(r + 1) * width];
            for (c, slot) in dst.iter_mut().enumerate() {
                *slot = if c < live && col_start + c < limit { raw[r * live + c] } else { f32::NEG_INFINITY };
            }
        }
        let probs = state.update(&scores, width, v, exp);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TileTrace {
                row_tile,
                col_tile,
                m: state.m.clone(),
                l: state.l.clone(),
                scores: MatrixF32::new(rows, width, scores.clone())?,
                probs: MatrixF32::new(rows, width, probs)?,
            });
        }
    }
    Ok(state)
}

fn attend_tiles(
    q: &MatrixF32,
    kv: &[(usize, Operand, Operand)],
    mask: Mask,
    cfg: &AttentionConfig,
    mut trace: Option<&mut Vec<TileTrace>>,
) -> Result<AttentionOutput> {
    let exp = Exp::from_cfg(cfg)?;
    let n_q = q.rows();
    let mut out = MatrixF32::zeros(n_q, cfg.head_dim);
    let mut lse = vec![0f32; n_q];
    for (row_tile, row_start) in (0..n_q).step_by(cfg.block_rows).enumerate() {
        let row_end = (row_start + cfg.block_rows).min(n_q);
        let q_tile = Operand::prepare(q.slice_rows(row_start, row_end), cfg.quantize)?;
        let state = attend_row_tile(
            &q_tile,
            row_start,
            kv.iter().map(|(s, k, v)| (*s, k, v)),
            mask,
            cfg,
            &exp,
            row_tile,
            trace.as_deref_mut(),
        )?;
        state.finish(&mut out, &mut lse, row_start);
    }
    Ok(AttentionOutput { out, lse })
}

fn check_cfg(cfg: &AttentionConfig, d: usize) -> Result<()> {
    cfg.validate()?;
    if cfg.head_dim != d {
        return Err(Error::shape(format!("config head dim {} but inputs have {d}", cfg.head_dim)));
    }
    Ok(())
}

/// Quantized tiled attention for one head, plus the compressed cache of its
/// keys and values.
///
/// Full `B_c` tiles become flushed cache blocks at `bits`; a partial last
/// tile goes to the decode buffer. The universal scales are the largest
/// stage-one tile scales seen.
pub fn turbo_prefill_head(
    input: &HeadInput,
    cfg: &AttentionConfig,
    bits: CacheBits,
) -> Result<(AttentionOutput, KvCacheHead)> {
    prefill_impl(input, cfg, bits, None)
}

/// [`turbo_prefill_head`] recording every tile step.
pub fn turbo_prefill_head_traced(
    input: &HeadInput,
    cfg: &AttentionConfig,
    bits: CacheBits,
    trace: &mut Vec<TileTrace>,
) -> Result<(AttentionOutput, KvCacheHead)> {
    prefill_impl(input, cfg, bits, Some(trace))
}

fn prefill_impl(
    input: &HeadInput,
    cfg: &AttentionConfig,
    bits: CacheBits,
    trace: Option<&mut Vec<TileTrace>>,
) -> Result<(AttentionOutput, KvCacheHead)> {
    let HeadInput { q, k, v } = input;
    check_shapes(q, k, v)?;
    check_cfg(cfg, k.cols())?;
    let n_k = k.rows();

    let mut k_blocks = Vec::new();
    let mut v_blocks = Vec::new();
    let mut tiles = Vec::new();
    for start in (0..n_k).step_by(cfg.block_cols) {
        let end = (start + cfg.block_cols).min(n_k);
        let kb = k.slice_rows(start, end);
        let vb = v.slice_rows(start, end);
        let kq = quant::sym_quant_int8(&kb)?;
        let vq = quant::sym_quant_int8(&vb)?;
        let (ko, vo) = if cfg.quantize {
            (Operand::Int(kq.clone()), Operand::Int(vq.clone()))
        } else {
            (Operand::Float(kb), Operand::Float(vb))
        };
        tiles.push((start, ko, vo));
        k_blocks.push(kq);
        v_blocks.push(vq);
    }

    let mask = Mask { causal: cfg.causal, n_q: q.rows(), n_k };
    let out = attend_tiles(q, &tiles, mask, cfg, trace)?;

    let scales = (universal_scale(&k_blocks), universal_scale(&v_blocks));
    let full = n_k / cfg.block_cols;
    let compress = |blocks: &[QuantBlockQ1]| -> Result<Vec<CacheBlock>> {
        blocks[..full].iter().map(|b| CacheBlock::compress(b, bits)).collect()
    };
    let mut cache =
        KvCacheHead::init_from_prefill(bits, cfg.head_dim, cfg.buffer_size, compress(&k_blocks)?, compress(&v_blocks)?, scales)?;
    for t in full * cfg.block_cols..n_k {
        cache.push_token(k.row(t), v.row(t))?;
    }
    Ok((out, cache))
}

/// Prefill over all heads; `plan.bits[h]` is the cache width of head `h`.
pub fn turbo_prefill(
    heads: &[HeadInput],
    cfg: &AttentionConfig,
    plan: &HeadPrecisionPlan,
) -> Result<(Vec<AttentionOutput>, Vec<KvCacheHead>)> {
    if plan.heads() != heads.len() {
        return Err(Error::validation(format!("plan covers {} heads, input has {}", plan.heads(), heads.len())));
    }
    let mut outs = Vec::with_capacity(heads.len());
    let mut caches = Vec::with_capacity(heads.len());
    for (input, &b) in heads.iter().zip(&plan.bits) {
        let (o, c) = turbo_prefill_head(input, cfg, CacheBits::from_bits(b)?)?;
        outs.push(o);
        caches.push(c);
    }
    Ok((outs, caches))
}

fn cache_tiles(cache: &KvCacheHead, quantize: bool) -> Result<Vec<(usize, Operand, Operand)>> {
    let mut tiles = Vec::with_capacity(cache.num_blocks());
    let mut start = 0;
    for b in 0..cache.num_blocks() {
        let k = cache.block_q1(b, Which::K)?;
        let v = cache.block_q1(b, Which::V)?;
        let rows = k.rows();
        let (ko, vo) = if quantize {
            (Operand::Int(k), Operand::Int(v))
        } else {
            (Operand::Float(quant::dequant_q1(&k)), Operand::Float(quant::dequant_q1(&v)))
        };
        tiles.push((start, ko, vo));
        start += rows;
    }
    Ok(tiles)
}

/// Attends query rows over everything in the cache (no causal mask).
pub fn decode_attend_rows(q: &MatrixF32, cache: &KvCacheHead, cfg: &AttentionConfig) -> Result<AttentionOutput> {
    check_cfg(cfg, q.cols())?;
    if cache.head_dim() != q.cols() {
        return Err(Error::shape(format!("query width {} but cache head dim {}", q.cols(), cache.head_dim())));
    }
    if cache.is_empty() {
        return Err(Error::validation("decode over an empty cache"));
    }
    // Cache blocks can be longer than B_c when n_b > B_c.
    let tiles = cache_tiles(cache, cfg.quantize)?;
    let widest = tiles.iter().map(|t| t.1.rows()).max().unwrap_or(0);
    let mut run_cfg = cfg.clone();
    run_cfg.block_cols = run_cfg.block_cols.max(widest);
    let mask = Mask { causal: false, n_q: q.rows(), n_k: cache.token_count() };
    attend_tiles(q, &tiles, mask, &run_cfg, None)
}

/// One query row over the cache.
pub fn decode_attend(q: &[f32], cache: &KvCacheHead, cfg: &AttentionConfig) -> Result<AttentionOutput> {
    decode_attend_rows(&MatrixF32::new(1, q.len(), q.to_vec())?, cache, cfg)
}

/// One decode step: attend `q` over the cache, then append `(k, v)`.
pub fn turbo_decode(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    cache: &mut KvCacheHead,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    let out = decode_attend(q, cache, cfg)?;
    cache.push_token(k, v)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{error_metrics, exact_tiled_attention, reference_attention};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> MatrixF32 {
        let n = Normal::new(0.0f32, 1.0).unwrap();
        MatrixF32::from_fn(rows, cols, |_, _| n.sample(rng))
    }

    fn head(rng: &mut ChaCha8Rng, n: usize, d: usize) -> HeadInput {
        HeadInput::new(gaussian(rng, n, d), gaussian(rng, n, d), gaussian(rng, n, d))
    }

    fn codes_of(blocks: &[CacheBlock]) -> Vec<crate::tensor::MatrixI8> {
        blocks.iter().map(|b| b.to_q1().codes).collect()
    }

    fn rel(a: &MatrixF32, b: &MatrixF32) -> f64 {
        error_metrics(a, b).unwrap().rel_frobenius.unwrap()
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let h = head(&mut rng, 1, 16);
        let (o, cache) = turbo_prefill_head(&h, &AttentionConfig::new(16), CacheBits::Four).unwrap();
        assert!(rel(&o.out, &h.v) <= 1e-2);
        assert!(o.lse[0].is_finite());
        assert_eq!(cache.token_count(), 1);
        assert_eq!(cache.buffered_tokens(), 1);
    }

    #[test]
    fn unquantized_exact_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for n in [1usize, 40, 130] {
            let h = head(&mut rng, n, 32);
            for causal in [false, true] {
                let mut cfg = AttentionConfig::new(32).with_blocks(32, 48);
                cfg.quantize = false;
                cfg.exp = ExpMode::Exact;
                cfg.causal = causal;
                let (o, _) = turbo_prefill_head(&h, &cfg, CacheBits::Eight).unwrap();
                let r = reference_attention(&h.q, &h.k, &h.v, causal).unwrap();
                assert!(rel(&o.out, &r.out) <= 1e-5);
                let t = exact_tiled_attention(&h.q, &h.k, &h.v, &cfg).unwrap();
                assert!(rel(&o.out, &t.out) <= 1e-6);
            }
        }
    }

    #[test]
    fn quantized_matches_dequantized_simulation() {
        // Same tiling and rounding, but every product done on dequantized
        // values in f64 with exact exp.
        fn q8(x: &[f64]) -> Vec<f64> {
            let m = x.iter().fold(0f64, |a, v| a.max(v.abs()));
            let s = if m > 0.0 { (m as f32 / 119.0) as f64 } else { 1.0 };
            x.iter().map(|v| ((v / s).round().clamp(-119.0, 119.0)) * s).collect()
        }
        fn block(m: &MatrixF32, a: usize, b: usize) -> Vec<f64> {
            m.slice_rows(a, b).data().iter().map(|&v| v as f64).collect()
        }
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let (n, d, b) = (100usize, 16usize, 32usize);
        let h = head(&mut rng, n, d);
        let mut cfg = AttentionConfig::new(d).with_blocks(b, b);
        cfg.exp = ExpMode::Exact;
        let (o, _) = turbo_prefill_head(&h, &cfg, CacheBits::Four).unwrap();

        let mut expect = vec![0f64; n * d];
        for i0 in (0..n).step_by(b) {
            let i1 = (i0 + b).min(n);
            let rows = i1 - i0;
            let q = q8(&block(&h.q, i0, i1));
            let (mut m, mut l, mut acc) = (vec![f64::NEG_INFINITY; rows], vec![0f64; rows], vec![0f64; rows * d]);
            for j0 in (0..n).step_by(b) {
                let j1 = (j0 + b).min(n);
                let cols = j1 - j0;
                let (k, v) = (q8(&block(&h.k, j0, j1)), q8(&block(&h.v, j0, j1)));
                let mut p = vec![0f64; rows * cols];
                for r in 0..rows {
                    let s: Vec<f64> = (0..cols)
                        .map(|c| (0..d).map(|x| q[r * d + x] * k[c * d + x]).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mn = s.iter().copied().fold(m[r], f64::max);
                    let alpha = (m[r] - mn).exp();
                    for c in 0..cols {
                        p[r * cols + c] = (s[c] - mn).exp();
                    }
                    l[r] = alpha * l[r] + p[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    acc[r * d..(r + 1) * d].iter_mut().for_each(|a| *a *= alpha);
                    m[r] = mn;
                }
                let pq = q8(&p);
                for r in 0..rows {
                    for c in 0..cols {
                        for x in 0..d {
                            acc[r * d + x] += pq[r * cols + c] * v[c * d + x];
                        }
                    }
                }
            }
            for r in 0..rows {
                for x in 0..d {
                    expect[(i0 + r) * d + x] = acc[r * d + x] / l[r];
                }
            }
        }
        let expect = MatrixF32::new(n, d, expect.into_iter().map(|v| v as f32).collect()).unwrap();
        // P̃ codes can flip at rounding ties between f32 and f64, so allow a few code steps.
        let m = error_metrics(&o.out, &expect).unwrap();
        assert!(m.rel_frobenius.unwrap() <= 1e-3, "{:?}", m.rel_frobenius);
        assert!(o.lse.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn block_sizes_do_not_change_error_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let h = head(&mut rng, 200, 64);
        let r = reference_attention(&h.q, &h.k, &h.v, false).unwrap();
        let base = rel(&turbo_prefill_head(&h, &AttentionConfig::new(64), CacheBits::Four).unwrap().0.out, &r.out);
        for (br, bc) in [(32, 32), (32, 64), (64, 32)] {
            let cfg = AttentionConfig::new(64).with_blocks(br, bc);
            let e = rel(&turbo_prefill_head(&h, &cfg, CacheBits::Four).unwrap().0.out, &r.out);
            assert!(e <= 3.0 * base, "({br},{bc}) {e} vs {base}");
        }
    }

    #[test]
    fn causal_output_ignores_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let h = head(&mut rng, 50, 8);
        let mut cfg = AttentionConfig::new(8).with_blocks(16, 16);
        cfg.causal = true;
        let (base, _) = turbo_prefill_head(&h, &cfg, CacheBits::Four).unwrap();
        let mut changed = h.clone();
        // Mutate rows inside the last key tile only so earlier tile scales are unchanged.
        for j in 48..50 {
            changed.k.row_mut(j).iter_mut().for_each(|x| *x *= -0.5);
            changed.v.row_mut(j).iter_mut().for_each(|x| *x = 0.25);
        }
        let (o, _) = turbo_prefill_head(&changed, &cfg, CacheBits::Four).unwrap();
        for t in 0..48 {
            assert_eq!(base.out.row(t), o.out.row(t), "row {t}");
        }
    }

    #[test]
    fn adversarial_rescale_keeps_rows_finite() {
        // Increasing scores push every earlier tile below the threshold.
        let d = 4;
        let n = 96;
        let q = MatrixF32::from_fn(2, d, |_, _| 1.0);
        let k = MatrixF32::from_fn(n, d, |j, _| j as f32 * 0.5);
        let v = MatrixF32::from_fn(n, d, |j, c| ((j + c) % 7) as f32 - 3.0);
        let cfg = AttentionConfig::new(d).with_blocks(2, 16);
        let (o, _) = turbo_prefill_head(&HeadInput::new(q.clone(), k.clone(), v.clone()), &cfg, CacheBits::Four).unwrap();
        assert!(o.out.data().iter().all(|x| x.is_finite()));
        assert!(o.lse.iter().all(|x| x.is_finite()));
        let vmax = v.max_abs();
        assert!(o.out.data().iter().all(|x| x.abs() <= vmax + 0.1));
        // Without quantization only the truncated tail and the cubic fit differ.
        let mut float_cfg = cfg.clone();
        float_cfg.quantize = false;
        let (f, _) = turbo_prefill_head(&HeadInput::new(q.clone(), k.clone(), v.clone()), &float_cfg, CacheBits::Four).unwrap();
        let r = reference_attention(&q, &k, &v, false).unwrap();
        assert!(error_metrics(&f.out, &r.out).unwrap().max_abs < 0.05);
    }

    #[test]
    fn trace_records_every_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let h = head(&mut rng, 70, 8);
        let cfg = AttentionConfig::new(8).with_blocks(32, 32);
        let mut trace = Vec::new();
        let (o, _) = turbo_prefill_head_traced(&h, &cfg, CacheBits::Four, &mut trace).unwrap();
        assert_eq!(trace.len(), 3 * 3);
        let last = trace.iter().rfind(|t| t.row_tile == 2).unwrap();
        assert_eq!(last.scores.shape(), (6, 32));
        for (r, (&m, &l)) in last.m.iter().zip(&last.l).enumerate() {
            assert!((o.lse[64 + r] - (m + l.ln())).abs() < 1e-6);
        }
        // padded columns of the last key tile are masked
        let t = trace.iter().find(|t| t.col_tile == 2).unwrap();
        assert!(t.scores.row(0)[6..].iter().all(|&s| s == f32::NEG_INFINITY));
        assert!(t.probs.row(0)[6..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn cache_layout_after_prefill() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let h = head(&mut rng, 150, 16);
        let cfg = AttentionConfig::new(16);
        let (_, cache) = turbo_prefill_head(&h, &cfg, CacheBits::Two).unwrap();
        assert_eq!(cache.token_count(), 150);
        assert_eq!(cache.flushed_blocks(), 2);
        assert_eq!(cache.buffered_tokens(), 22);
        let kq: Vec<_> = (0..3).map(|b| quant::sym_quant_int8(&h.k.slice_rows(b * 64, (b * 64 + 64).min(150))).unwrap()).collect();
        assert_eq!(cache.universal_scales().0, universal_scale(&kq));
        assert!(turbo_prefill(std::slice::from_ref(&h), &cfg, &HeadPrecisionPlan::uniform(2, 4)).is_err());
    }

    #[test]
    fn empty_prefill() {
        let z = MatrixF32::zeros(0, 8);
        let (o, cache) = turbo_prefill_head(&HeadInput::new(z.clone(), z.clone(), z), &AttentionConfig::new(8), CacheBits::Four).unwrap();
        assert_eq!(o.out.rows(), 0);
        assert!(cache.is_empty());
        assert!(decode_attend(&[0.0; 8], &cache, &AttentionConfig::new(8)).is_err());
    }

    #[test]
    fn decode_single_token_cache() {
        let mut cache = KvCacheHead::new(CacheBits::Four, 4, 64, (0.05, 0.05)).unwrap();
        cache.push_token(&[1.0, 0.0, -1.0, 0.5], &[2.0, -3.0, 0.5, 1.0]).unwrap();
        let o = decode_attend(&[0.3, 0.1, 0.2, -0.4], &cache, &AttentionConfig::new(4)).unwrap();
        for (a, b) in o.out.row(0).iter().zip([2.0, -3.0, 0.5, 1.0]) {
            assert!((a - b).abs() <= 0.05);
        }
    }

    #[test]
    fn decode_matches_prefill_on_same_cache_contents() {
        // With an INT8 cache and a buffer scale equal to the tile scales, decode
        // sees exactly the codes prefill used.
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let h = head(&mut rng, 128, 16);
        let cfg = AttentionConfig::new(16);
        let (_, cache) = turbo_prefill_head(&h, &cfg, CacheBits::Eight).unwrap();
        let q = gaussian(&mut rng, 1, 16);
        let dec = decode_attend(q.row(0), &cache, &cfg).unwrap();
        let mut appended = h.clone();
        appended.q = q.clone();
        let (pre, _) = turbo_prefill_head(&appended, &cfg, CacheBits::Eight).unwrap();
        assert_eq!(dec.out, pre.out);
    }

    #[test]
    fn decode_step_appends_after_attending() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let h = head(&mut rng, 64, 8);
        let cfg = AttentionConfig::new(8);
        let (_, mut cache) = turbo_prefill_head(&h, &cfg, CacheBits::Four).unwrap();
        let before = decode_attend(&[0.5; 8], &cache, &cfg).unwrap();
        let o = turbo_decode(&[0.5; 8], &[9.0; 8], &[9.0; 8], &mut cache, &cfg).unwrap();
        assert_eq!(o, before);
        assert_eq!(cache.token_count(), 65);
        assert_eq!(cache.buffered_tokens(), 1);
    }

    #[test]
    fn fewer_bits_more_decode_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut wins = 0;
        for _ in 0..10 {
            let h = head(&mut rng, 256, 32);
            let cfg = AttentionConfig::new(32);
            let r = reference_attention(&h.q, &h.k, &h.v, false).unwrap();
            let err = |bits| {
                let (_, cache) = turbo_prefill_head(&h, &cfg, bits).unwrap();
                rel(&decode_attend_rows(&h.q, &cache, &cfg).unwrap().out, &r.out)
            };
            let (e2, e4, e8) = (err(CacheBits::Two), err(CacheBits::Four), err(CacheBits::Eight));
            assert!(e2 >= e4 && e4 >= e8, "{e2} {e4} {e8}");
            wins += 1;
        }
        assert_eq!(wins, 10);
    }

    #[test]
    fn prefill_then_push_gives_same_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..5 {
            let mut h = head(&mut rng, 192, 16);
            // pin the last block's peak to the running maximum so no clamping occurs
            let peak_k = h.k.slice_rows(0, 128).max_abs();
            let peak_v = h.v.slice_rows(0, 128).max_abs();
            let t = rng.random_range(128..192);
            for (m, peak) in [(&mut h.k, peak_k), (&mut h.v, peak_v)] {
                for j in 128..192 {
                    m.row_mut(j).iter_mut().for_each(|x| *x = x.clamp(-peak, peak));
                }
                m.set(t, 0, peak);
            }
            let cfg = AttentionConfig::new(16);
            let (_, full) = turbo_prefill_head(&h, &cfg, CacheBits::Four).unwrap();
            let short = HeadInput::new(h.q.slice_rows(0, 128), h.k.slice_rows(0, 128), h.v.slice_rows(0, 128));
            let (_, mut pushed) = turbo_prefill_head(&short, &cfg, CacheBits::Four).unwrap();
            for j in 128..192 {
                pushed.push_token(h.k.row(j), h.v.row(j)).unwrap();
            }
            for w in [Which::K, Which::V] {
                assert_eq!(codes_of(full.flushed(w)), codes_of(pushed.flushed(w)));
            }
            let q = gaussian(&mut rng, 1, 16);
            let a = decode_attend(q.row(0), &full, &cfg).unwrap();
            let b = decode_attend(q.row(0), &pushed, &cfg).unwrap();
            assert!(error_metrics(&a.out, &b.out).unwrap().max_abs <= 1e-6);
        }
    }
}
