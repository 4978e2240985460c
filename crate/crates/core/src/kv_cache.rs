//! Per-head compressed key/value cache.
//!
//! A head holds a list of flushed blocks (stage-two packed codes, or raw
//! stage-one codes when stored at 8 bits) plus an INT8 decode buffer. Decode
//! tokens are quantized with a fixed per-head universal scale, clamping to
//! ±119, so buffered codes never need re-quantization. When the buffer holds
//! `capacity` tokens it is compressed channelwise and appended as one block.
//!
//! # Cache file layout
//!
//! All integers little-endian.
//!
//! ```text
//! file    := "TQKV" u32:version(=1) u32:heads head*
//! head    := u32:bits u32:head_dim u32:capacity u64:token_count
//!            f32:universal_scale_k f32:universal_scale_v
//!            u32:flushed_blocks u32:buffer_rows
//!            (record_k record_v)*flushed_blocks
//!            i8[buffer_rows*head_dim]:buffer_k i8[buffer_rows*head_dim]:buffer_v
//! record  := u32:rows f32:parent_scale groups payload
//! groups  := (i16:scale_int i16:zero_int)*head_dim     -- absent at 8 bits
//! payload := rows * ceil(head_dim*bits/8) bytes        -- packed LSB-first, or i8 codes at 8 bits
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::quant::{self, Q2Block, QuantBlockQ1};
use crate::tensor::{MatrixF32, MatrixI8, PackedMatrix};

pub const CACHE_MAGIC: &[u8; 4] = b"TQKV";
pub const CACHE_VERSION: u32 = 1;

const FILE_HEADER_BYTES: usize = 12;
const HEAD_HEADER_BYTES: usize = 36;
const RECORD_HEADER_BYTES: usize = 8;
const GROUP_BYTES: usize = 4;

/// Storage width of a head's flushed blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CacheBits {
    Two,
    Four,
    /// Stage-one codes only, no stage-two compression.
    Eight,
}

impl CacheBits {
    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            2 => Ok(CacheBits::Two),
            4 => Ok(CacheBits::Four),
            8 => Ok(CacheBits::Eight),
            b => Err(Error::validation(format!("cache width must be 2, 4 or 8 bits, got {b}"))),
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            CacheBits::Two => 2,
            CacheBits::Four => 4,
            CacheBits::Eight => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    K,
    V,
}

/// One flushed block of keys or values.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheBlock {
    Int8(QuantBlockQ1),
    Packed(Q2Block),
}

impl CacheBlock {
    pub fn compress(q1: &QuantBlockQ1, bits: CacheBits) -> Result<Self> {
        match bits {
            CacheBits::Eight => Ok(CacheBlock::Int8(q1.clone())),
            b => Ok(CacheBlock::Packed(Q2Block::compress(&q1.codes, b.bits(), q1.scale)?)),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            CacheBlock::Int8(q) => q.rows(),
            CacheBlock::Packed(p) => p.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            CacheBlock::Int8(q) => q.cols(),
            CacheBlock::Packed(p) => p.cols(),
        }
    }

    pub fn parent_scale(&self) -> f32 {
        match self {
            CacheBlock::Int8(q) => q.scale,
            CacheBlock::Packed(p) => p.parent_scale,
        }
    }

    fn width(&self) -> u8 {
        match self {
            CacheBlock::Int8(_) => 8,
            CacheBlock::Packed(p) => p.bits(),
        }
    }

    /// Stage-one view of the block.
    pub fn to_q1(&self) -> QuantBlockQ1 {
        match self {
            CacheBlock::Int8(q) => q.clone(),
            CacheBlock::Packed(p) => QuantBlockQ1 { codes: p.dequant_to_q1(), scale: p.parent_scale },
        }
    }

    fn payload_bytes(&self) -> usize {
        match self {
            CacheBlock::Int8(q) => q.rows() * q.cols(),
            CacheBlock::Packed(p) => p.codes.bytes().len(),
        }
    }

    fn metadata_bytes(&self) -> usize {
        match self {
            CacheBlock::Int8(_) => RECORD_HEADER_BYTES,
            CacheBlock::Packed(p) => RECORD_HEADER_BYTES + GROUP_BYTES * p.cols(),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&self.parent_scale().to_le_bytes());
        match self {
            CacheBlock::Int8(q) => out.extend(q.codes.data().iter().map(|&c| c as u8)),
            CacheBlock::Packed(p) => {
                for (s, z) in p.scale_int.iter().zip(&p.zero_int) {
                    out.extend_from_slice(&s.to_le_bytes());
                    out.extend_from_slice(&z.to_le_bytes());
                }
                out.extend_from_slice(p.codes.bytes());
            }
        }
    }

    fn decode(r: &mut ByteReader<'_>, bits: CacheBits, cols: usize) -> Result<Self> {
        let rows = r.u32()? as usize;
        let parent_scale = r.f32()?;
        match bits {
            CacheBits::Eight => {
                let at = r.offset() as u64;
                let raw = r.take(rows * cols)?;
                let codes = MatrixI8::new(rows, cols, raw.iter().map(|&b| b as i8).collect())
                    .map_err(|e| Error::format(at, e.to_string()))?;
                Ok(CacheBlock::Int8(QuantBlockQ1 { codes, scale: parent_scale }))
            }
            b => {
                let mut scale_int = Vec::with_capacity(cols);
                let mut zero_int = Vec::with_capacity(cols);
                for _ in 0..cols {
                    let at = r.offset() as u64;
                    let s = r.i16()?;
                    if s < 1 {
                        return Err(Error::format(at, format!("integer scale {s} < 1")));
                    }
                    scale_int.push(s);
                    zero_int.push(r.i16()?);
                }
                let raw = r.take(rows * PackedMatrix::row_bytes(cols, b.bits()))?;
                let codes = PackedMatrix::from_packed(rows, cols, b.bits(), raw.to_vec())?;
                Ok(CacheBlock::Packed(Q2Block { codes, scale_int, zero_int, parent_scale }))
            }
        }
    }
}

/// Largest stage-one scale over a set of blocks, or 1 when there are none.
pub fn universal_scale(blocks: &[QuantBlockQ1]) -> f32 {
    blocks.iter().map(|b| b.scale).fold(None, |m: Option<f32>, s| Some(m.map_or(s, |m| m.max(s)))).unwrap_or(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheHead {
    bits: CacheBits,
    head_dim: usize,
    capacity: usize,
    flushed_k: Vec<CacheBlock>,
    flushed_v: Vec<CacheBlock>,
    buffer_k: Vec<i8>,
    buffer_v: Vec<i8>,
    universal_scale_k: f32,
    universal_scale_v: f32,
    token_count: usize,
}

impl KvCacheHead {
    /// Empty cache. `capacity` is the decode buffer size `n_b`.
    pub fn new(bits: CacheBits, head_dim: usize, capacity: usize, universal_scales: (f32, f32)) -> Result<Self> {
        if head_dim == 0 || capacity == 0 {
            return Err(Error::validation("head dim and buffer capacity must be positive"));
        }
        let (sk, sv) = universal_scales;
        if !(sk > 0.0 && sk.is_finite() && sv > 0.0 && sv.is_finite()) {
            return Err(Error::validation(format!("universal scales must be positive, got ({sk}, {sv})")));
        }
        Ok(Self {
            bits,
            head_dim,
            capacity,
            flushed_k: Vec::new(),
            flushed_v: Vec::new(),
            buffer_k: Vec::new(),
            buffer_v: Vec::new(),
            universal_scale_k: sk,
            universal_scale_v: sv,
            token_count: 0,
        })
    }

    /// Cache holding already-compressed prefill blocks, with an empty buffer.
    pub fn init_from_prefill(
        bits: CacheBits,
        head_dim: usize,
        capacity: usize,
        blocks_k: Vec<CacheBlock>,
        blocks_v: Vec<CacheBlock>,
        universal_scales: (f32, f32),
    ) -> Result<Self> {
        if blocks_k.len() != blocks_v.len() {
            return Err(Error::validation(format!(
                "{} key blocks but {} value blocks",
                blocks_k.len(),
                blocks_v.len()
            )));
        }
        let mut cache = Self::new(bits, head_dim, capacity, universal_scales)?;
        for (i, (k, v)) in blocks_k.iter().zip(&blocks_v).enumerate() {
            if k.rows() != v.rows() {
                return Err(Error::validation(format!("block {i}: {} key rows, {} value rows", k.rows(), v.rows())));
            }
            for b in [k, v] {
                if b.cols() != head_dim {
                    return Err(Error::shape(format!("block {i} has {} channels, head dim {head_dim}", b.cols())));
                }
                if b.width() != bits.bits() {
                    return Err(Error::validation(format!("block {i} stored at {} bits, head at {}", b.width(), bits.bits())));
                }
            }
            cache.token_count += k.rows();
        }
        cache.flushed_k = blocks_k;
        cache.flushed_v = blocks_v;
        Ok(cache)
    }

    pub fn bits(&self) -> CacheBits {
        self.bits
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }

    pub fn universal_scales(&self) -> (f32, f32) {
        (self.universal_scale_k, self.universal_scale_v)
    }

    pub fn flushed_blocks(&self) -> usize {
        self.flushed_k.len()
    }

    pub fn flushed(&self, which: Which) -> &[CacheBlock] {
        match which {
            Which::K => &self.flushed_k,
            Which::V => &self.flushed_v,
        }
    }

    pub fn buffered_tokens(&self) -> usize {
        self.buffer_k.len() / self.head_dim
    }

    /// Flushed blocks plus the live buffer when it holds tokens.
    pub fn num_blocks(&self) -> usize {
        self.flushed_blocks() + usize::from(self.buffered_tokens() > 0)
    }

    /// Quantizes one token with the universal scales and appends it to the
    /// buffer, flushing when the buffer reaches capacity.
    pub fn push_token(&mut self, k: &[f32], v: &[f32]) -> Result<()> {
        if k.len() != self.head_dim || v.len() != self.head_dim {
            return Err(Error::shape(format!(
                "token of widths ({}, {}) into head dim {}",
                k.len(),
                v.len(),
                self.head_dim
            )));
        }
        if k.iter().chain(v).any(|x| !x.is_finite()) {
            return Err(Error::validation("non-finite value in pushed token"));
        }
        self.buffer_k.extend(quant::quantize_with_scale(k, self.universal_scale_k));
        self.buffer_v.extend(quant::quantize_with_scale(v, self.universal_scale_v));
        self.token_count += 1;
        if self.buffered_tokens() >= self.capacity {
            self.flush_buffer()?;
        }
        Ok(())
    }

    /// Compresses whatever the buffer holds into one flushed block. No-op when empty.
    pub fn flush_buffer(&mut self) -> Result<()> {
        let rows = self.buffered_tokens();
        if rows == 0 {
            return Ok(());
        }
        let k = QuantBlockQ1 {
            codes: MatrixI8::new(rows, self.head_dim, std::mem::take(&mut self.buffer_k))?,
            scale: self.universal_scale_k,
        };
        let v = QuantBlockQ1 {
            codes: MatrixI8::new(rows, self.head_dim, std::mem::take(&mut self.buffer_v))?,
            scale: self.universal_scale_v,
        };
        self.flushed_k.push(CacheBlock::compress(&k, self.bits)?);
        self.flushed_v.push(CacheBlock::compress(&v, self.bits)?);
        Ok(())
    }

    /// Stage-one codes and scale of block `index`; the index one past the
    /// flushed blocks addresses the live buffer.
    pub fn read_block_q1(&self, index: usize, which: Which) -> Result<(MatrixI8, f32)> {
        let q = self.block_q1(index, which)?;
        Ok((q.codes, q.scale))
    }

    pub fn block_q1(&self, index: usize, which: Which) -> Result<QuantBlockQ1> {
        let flushed = self.flushed(which);
        if index < flushed.len() {
            return Ok(flushed[index].to_q1());
        }
        if index == flushed.len() && self.buffered_tokens() > 0 {
            let (codes, scale) = match which {
                Which::K => (&self.buffer_k, self.universal_scale_k),
                Which::V => (&self.buffer_v, self.universal_scale_v),
            };
            return Ok(QuantBlockQ1 {
                codes: MatrixI8::new(self.buffered_tokens(), self.head_dim, codes.clone())?,
                scale,
            });
        }
        Err(Error::Bounds { index, len: self.num_blocks() })
    }

    /// FP32 keys and values as the attention kernels see them.
    pub fn dequantize(&self) -> (MatrixF32, MatrixF32) {
        let mut k = MatrixF32::zeros(0, self.head_dim);
        let mut v = MatrixF32::zeros(0, self.head_dim);
        for b in 0..self.num_blocks() {
            for (which, out) in [(Which::K, &mut k), (Which::V, &mut v)] {
                let q = quant::dequant_q1(&self.block_q1(b, which).expect("index in range"));
                for r in 0..q.rows() {
                    out.push_row(q.row(r)).expect("width matches");
                }
            }
        }
        (k, v)
    }

    fn payload_bytes(&self) -> usize {
        self.flushed_k.iter().chain(&self.flushed_v).map(CacheBlock::payload_bytes).sum()
    }

    fn metadata_bytes(&self) -> usize {
        HEAD_HEADER_BYTES + self.flushed_k.iter().chain(&self.flushed_v).map(CacheBlock::metadata_bytes).sum::<usize>()
    }

    fn buffer_bytes(&self) -> usize {
        self.buffer_k.len() + self.buffer_v.len()
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.bits.bits() as u32).to_le_bytes());
        out.extend_from_slice(&(self.head_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.capacity as u32).to_le_bytes());
        out.extend_from_slice(&(self.token_count as u64).to_le_bytes());
        out.extend_from_slice(&self.universal_scale_k.to_le_bytes());
        out.extend_from_slice(&self.universal_scale_v.to_le_bytes());
        out.extend_from_slice(&(self.flushed_blocks() as u32).to_le_bytes());
        out.extend_from_slice(&(self.buffered_tokens() as u32).to_le_bytes());
        for (k, v) in self.flushed_k.iter().zip(&self.flushed_v) {
            k.encode(out);
            v.encode(out);
        }
        out.extend(self.buffer_k.iter().map(|&c| c as u8));
        out.extend(self.buffer_v.iter().map(|&c| c as u8));
    }

    fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        let at = r.offset() as u64;
        let bits = CacheBits::from_bits(r.u32()?.min(255) as u8).map_err(|e| Error::format(at, e.to_string()))?;
        let head_dim = r.u32()? as usize;
        let capacity = r.u32()? as usize;
        let token_count = r.u64()? as usize;
        let scales = (r.f32()?, r.f32()?);
        let blocks = r.u32()? as usize;
        let at_rows = r.offset() as u64;
        let buffer_rows = r.u32()? as usize;
        let mut cache = Self::new(bits, head_dim, capacity, scales).map_err(|e| Error::format(at, e.to_string()))?;
        if buffer_rows >= capacity {
            return Err(Error::format(at_rows, format!("buffer holds {buffer_rows} rows, capacity {capacity}")));
        }
        for _ in 0..blocks {
            let at = r.offset() as u64;
            let k = CacheBlock::decode(r, bits, head_dim)?;
            let v = CacheBlock::decode(r, bits, head_dim)?;
            if k.rows() != v.rows() {
                return Err(Error::format(at, "key and value blocks differ in length"));
            }
            cache.flushed_k.push(k);
            cache.flushed_v.push(v);
        }
        for buf in [&mut cache.buffer_k, &mut cache.buffer_v] {
            let at = r.offset() as u64;
            let raw = r.take(buffer_rows * head_dim)?;
            if raw.iter().any(|&b| !(-119..=119).contains(&(b as i8))) {
                return Err(Error::format(at, "buffered code outside [-119, 119]"));
            }
            buf.extend(raw.iter().map(|&b| b as i8));
        }
        let stored: usize = cache.flushed_k.iter().map(CacheBlock::rows).sum::<usize>() + buffer_rows;
        if stored != token_count {
            return Err(Error::format(at, format!("header claims {token_count} tokens, blocks hold {stored}")));
        }
        cache.token_count = token_count;
        Ok(cache)
    }
}

/// Serializes a set of heads into one cache file image.
pub fn encode_cache(heads: &[KvCacheHead]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(heads.len() as u32).to_le_bytes());
    for h in heads {
        h.encode(&mut out);
    }
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<Vec<KvCacheHead>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::format(0, "bad cache magic"));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::format(4, format!("unsupported cache version {version}")));
    }
    let n = r.u32()? as usize;
    let heads = (0..n).map(|_| KvCacheHead::decode(&mut r)).collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::format(r.offset() as u64, format!("{} trailing bytes", r.remaining())));
    }
    Ok(heads)
}

pub fn save_cache(path: impl AsRef<Path>, heads: &[KvCacheHead]) -> Result<()> {
    fs::write(path, encode_cache(heads))?;
    Ok(())
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<Vec<KvCacheHead>> {
    decode_cache(&fs::read(path)?)
}

/// Byte accounting of a cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSizeReport {
    pub payload_bytes: u64,
    pub metadata_bytes: u64,
    pub buffer_bytes: u64,
    /// Keys and values of every stored token at 2 bytes per element.
    pub fp16_equivalent_bytes: u64,
    /// `fp16_equivalent_bytes / total_bytes`; `None` for an empty cache.
    pub compression_ratio: Option<f64>,
}

impl CacheSizeReport {
    pub fn total_bytes(&self) -> u64 {
        self.payload_bytes + self.metadata_bytes + self.buffer_bytes
    }

    fn finish(payload: usize, metadata: usize, buffer: usize, fp16: usize) -> Self {
        let total = payload + metadata + buffer;
        Self {
            payload_bytes: payload as u64,
            metadata_bytes: metadata as u64,
            buffer_bytes: buffer as u64,
            fp16_equivalent_bytes: fp16 as u64,
            compression_ratio: (fp16 > 0).then(|| fp16 as f64 / total as f64),
        }
    }

    /// Sizes of the file [`encode_cache`] would produce for `heads`.
    pub fn of(heads: &[KvCacheHead]) -> Self {
        let payload = heads.iter().map(KvCacheHead::payload_bytes).sum();
        let metadata = FILE_HEADER_BYTES + heads.iter().map(KvCacheHead::metadata_bytes).sum::<usize>();
        let buffer = heads.iter().map(KvCacheHead::buffer_bytes).sum();
        let fp16 = heads.iter().map(|h| 2 * 2 * h.token_count * h.head_dim).sum();
        Self::finish(payload, metadata, buffer, fp16)
    }
}

/// Projected sizes for `tokens` tokens per head, flushed in blocks of
/// `capacity` with the remainder left in the buffer.
pub fn size_report(tokens: usize, capacity: usize, head_dim: usize, bits_per_head: &[u8]) -> Result<CacheSizeReport> {
    if capacity == 0 {
        return Err(Error::validation("buffer capacity must be positive"));
    }
    let (full, rest) = (tokens / capacity, tokens % capacity);
    let mut payload = 0;
    let mut metadata = FILE_HEADER_BYTES;
    for &b in bits_per_head {
        let bits = CacheBits::from_bits(b)?;
        let row = match bits {
            CacheBits::Eight => head_dim,
            b => PackedMatrix::row_bytes(head_dim, b.bits()),
        };
        let groups = if bits == CacheBits::Eight { 0 } else { GROUP_BYTES * head_dim };
        payload += 2 * full * capacity * row;
        metadata += HEAD_HEADER_BYTES + 2 * full * (RECORD_HEADER_BYTES + groups);
    }
    let heads = bits_per_head.len();
    Ok(CacheSizeReport::finish(payload, metadata, heads * 2 * rest * head_dim, heads * 4 * tokens * head_dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{asym_quant_q2, dequant_q2_to_q1, sym_quant_int8};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> MatrixF32 {
        MatrixF32::from_fn(rows, cols, |_, _| rng.random_range(-3.0f32..3.0))
    }

    fn prefill(bits: CacheBits, k: &MatrixF32, v: &MatrixF32, block: usize, capacity: usize) -> KvCacheHead {
        let split = |m: &MatrixF32| -> Vec<QuantBlockQ1> {
            (0..m.rows()).step_by(block).map(|s| sym_quant_int8(&m.slice_rows(s, (s + block).min(m.rows()))).unwrap()).collect()
        };
        let (qk, qv) = (split(k), split(v));
        let scales = (universal_scale(&qk), universal_scale(&qv));
        let ck = qk.iter().map(|q| CacheBlock::compress(q, bits).unwrap()).collect();
        let cv = qv.iter().map(|q| CacheBlock::compress(q, bits).unwrap()).collect();
        KvCacheHead::init_from_prefill(bits, k.cols(), capacity, ck, cv, scales).unwrap()
    }

    #[test]
    fn empty_prefill() {
        let c = KvCacheHead::init_from_prefill(CacheBits::Four, 8, 4, vec![], vec![], (1.0, 1.0)).unwrap();
        assert_eq!(c.token_count(), 0);
        assert_eq!(c.num_blocks(), 0);
        assert!(CacheSizeReport::of(&[c]).compression_ratio.is_none());
    }

    #[test]
    fn two_block_prefill() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (k, v) = (random(&mut rng, 128, 16), random(&mut rng, 128, 16));
        let c = prefill(CacheBits::Four, &k, &v, 64, 64);
        assert_eq!(c.token_count(), 128);
        assert_eq!(c.flushed_blocks(), 2);
        assert_eq!(c.buffered_tokens(), 0);
    }

    #[test]
    fn mismatched_blocks_rejected() {
        let q = sym_quant_int8(&MatrixF32::zeros(4, 8)).unwrap();
        let b = CacheBlock::compress(&q, CacheBits::Four).unwrap();
        let err = KvCacheHead::init_from_prefill(CacheBits::Four, 8, 4, vec![b.clone(), b.clone()], vec![b.clone()], (1.0, 1.0));
        assert!(matches!(err, Err(Error::Validation(_))));
        let err = KvCacheHead::init_from_prefill(CacheBits::Two, 8, 4, vec![b.clone()], vec![b], (1.0, 1.0));
        assert!(err.is_err());
    }

    #[test]
    fn hand_computed_sizes_4bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (k, v) = (random(&mut rng, 128, 64), random(&mut rng, 128, 64));
        let c = prefill(CacheBits::Four, &k, &v, 64, 64);
        let r = CacheSizeReport::of(std::slice::from_ref(&c));
        // 2 blocks x (K, V) x 64 rows x 32 bytes
        assert_eq!(r.payload_bytes, 8192);
        // file 12 + head 36 + 4 records x (8 + 64 channels x 4)
        assert_eq!(r.metadata_bytes, 12 + 36 + 4 * (8 + 256));
        assert_eq!(r.buffer_bytes, 0);
        assert_eq!(r.fp16_equivalent_bytes, 2 * 2 * 128 * 64);
        assert_eq!(r.total_bytes() as usize, encode_cache(&[c]).len());
        assert_eq!(r, size_report(128, 64, 64, &[4]).unwrap());
    }

    #[test]
    fn pushed_token_matches_prefill_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (k, v) = (random(&mut rng, 64, 8), random(&mut rng, 64, 8));
        let mut c = prefill(CacheBits::Eight, &k, &v, 64, 64);
        c.push_token(k.row(5), v.row(5)).unwrap();
        let (codes, scale) = c.read_block_q1(1, Which::K).unwrap();
        let (pcodes, pscale) = c.read_block_q1(0, Which::K).unwrap();
        assert_eq!(scale, pscale);
        assert_eq!(codes.row(0), pcodes.row(5));
    }

    #[test]
    fn outlier_token_clamps_one_code() {
        let k = MatrixF32::from_fn(4, 4, |r, c| (r as f32 - 1.5) * (c as f32 + 1.0));
        let mut c = prefill(CacheBits::Four, &k, &k, 4, 8);
        let (su, _) = c.universal_scales();
        let mut tok = vec![0.5f32, -1.0, 1.5, 2.0];
        let range = 119.0 * su;
        tok[2] = 10.0 * range;
        c.push_token(&tok, &tok).unwrap();
        let (codes, _) = c.read_block_q1(1, Which::K).unwrap();
        assert_eq!(codes.get(0, 2), 119);
        let expected = quant::quantize_with_scale(&[0.5, -1.0, 2.0], su);
        assert_eq!([codes.get(0, 0), codes.get(0, 1), codes.get(0, 3)], expected[..]);
    }

    #[test]
    fn buffer_flushes_at_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut c = KvCacheHead::new(CacheBits::Two, 8, 4, (0.05, 0.05)).unwrap();
        for i in 0..4 {
            let t: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            c.push_token(&t, &t).unwrap();
            assert!(c.buffered_tokens() < c.capacity());
            assert_eq!(c.token_count(), i + 1);
        }
        assert_eq!(c.buffered_tokens(), 0);
        assert_eq!(c.flushed_blocks(), 1);
        assert!(c.push_token(&[0.0; 3], &[0.0; 8]).is_err());
    }

    #[test]
    fn flush_behaviour() {
        let mut c = KvCacheHead::new(CacheBits::Four, 4, 8, (0.1, 0.1)).unwrap();
        c.flush_buffer().unwrap();
        assert_eq!(c.flushed_blocks(), 0);

        // constant rows reconstruct exactly
        for _ in 0..8 {
            c.push_token(&[0.3, -0.7, 1.1, 0.0], &[0.3, -0.7, 1.1, 0.0]).unwrap();
        }
        let (codes, scale) = c.read_block_q1(0, Which::V).unwrap();
        assert_eq!(scale, 0.1);
        let expected = quant::quantize_with_scale(&[0.3, -0.7, 1.1, 0.0], 0.1);
        for r in 0..8 {
            assert_eq!(codes.row(r), &expected[..]);
        }
    }

    #[test]
    fn flush_matches_groupwise_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut c = KvCacheHead::new(CacheBits::Four, 6, 16, (0.02, 0.02)).unwrap();
        let mut tokens = Vec::new();
        for _ in 0..10 {
            let t: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            c.push_token(&t, &t).unwrap();
            tokens.push(t);
        }
        let (buffered, _) = c.read_block_q1(0, Which::K).unwrap();
        c.flush_buffer().unwrap();
        assert_eq!(c.buffered_tokens(), 0);
        let (flushed, _) = c.read_block_q1(0, Which::K).unwrap();
        for ch in 0..6 {
            let g = asym_quant_q2(&buffered.column(ch), 4, 0.02).unwrap();
            assert_eq!(flushed.column(ch), dequant_q2_to_q1(&g));
        }
        assert!(matches!(c.read_block_q1(1, Which::K), Err(Error::Bounds { .. })));
    }

    #[test]
    fn buffer_read_is_raw() {
        let mut c = KvCacheHead::new(CacheBits::Two, 3, 4, (0.5, 0.25)).unwrap();
        c.push_token(&[1.0, -1.0, 0.2], &[0.5, 0.0, -0.3]).unwrap();
        let (k, sk) = c.read_block_q1(0, Which::K).unwrap();
        let (v, sv) = c.read_block_q1(0, Which::V).unwrap();
        assert_eq!((sk, sv), (0.5, 0.25));
        assert_eq!(k.data(), &[2, -2, 0]);
        assert_eq!(v.data(), &[2, 0, -1]);
    }

    #[test]
    fn random_flushed_block_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let (k, v) = (random(&mut rng, 64, 16), random(&mut rng, 64, 16));
        let c = prefill(CacheBits::Four, &k, &v, 64, 64);
        let original = sym_quant_int8(&k).unwrap();
        let (codes, _) = c.read_block_q1(0, Which::K).unwrap();
        if let CacheBlock::Packed(p) = &c.flushed(Which::K)[0] {
            for ch in 0..16 {
                let s = p.scale_int[ch] as i32;
                for r in 0..64 {
                    let d = (codes.get(r, ch) as i32 - original.codes.get(r, ch) as i32).abs();
                    assert!(2 * d <= 3 * s);
                }
            }
        } else {
            panic!("expected packed block");
        }
    }

    #[test]
    fn flushed_blocks_are_append_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (k, v) = (random(&mut rng, 64, 8), random(&mut rng, 64, 8));
        let mut c = prefill(CacheBits::Two, &k, &v, 32, 16);
        let before: Vec<CacheBlock> = c.flushed(Which::K).to_vec();
        for _ in 0..40 {
            let t: Vec<f32> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            c.push_token(&t, &t).unwrap();
            assert_eq!(&c.flushed(Which::K)[..before.len()], &before[..]);
            assert!(c.buffered_tokens() < 16);
        }
        assert_eq!(c.token_count(), 104);
        assert_eq!(c.flushed_blocks(), 4);
        assert_eq!(c.buffered_tokens(), 8);
    }

    #[test]
    fn cache_file_roundtrip_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let mut heads = Vec::new();
        for bits in [CacheBits::Two, CacheBits::Four, CacheBits::Eight] {
            let (k, v) = (random(&mut rng, 100, 12), random(&mut rng, 100, 12));
            let mut c = prefill(bits, &k, &v, 32, 32);
            for r in 0..7 {
                c.push_token(k.row(r), v.row(r)).unwrap();
            }
            heads.push(c);
        }
        let bytes = encode_cache(&heads);
        assert_eq!(CacheSizeReport::of(&heads).total_bytes() as usize, bytes.len());
        assert_eq!(decode_cache(&bytes).unwrap(), heads);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.tqkv");
        save_cache(&path, &heads).unwrap();
        assert_eq!(load_cache(&path).unwrap(), heads);
        assert!(decode_cache(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn projected_ratios() {
        let mixed: Vec<u8> = (0..32).map(|h| if h % 2 == 0 { 2 } else { 4 }).collect();
        let r_mixed = size_report(8192, 64, 128, &mixed).unwrap();
        let r_four = size_report(8192, 64, 128, &[4; 32]).unwrap();
        assert!(r_mixed.compression_ratio.unwrap() > 4.4);
        assert!(r_four.compression_ratio.unwrap() < r_mixed.compression_ratio.unwrap());
        assert!(size_report(0, 64, 128, &[4]).unwrap().compression_ratio.is_none());
    }
}
