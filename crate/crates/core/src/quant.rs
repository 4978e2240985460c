//! Two-stage (progressive) quantization.
//!
//! Stage one maps an FP32 block to signed INT8 codes with a single symmetric
//! scale `max|x| / 119`. Stage two compresses each channel of an INT8 block to
//! unsigned 4- or 2-bit codes with an integer scale and integer zero point;
//! reconstruction back to INT8 is `(code + zero) * scale`, integer only.
//!
//! Rounding is half-away-from-zero throughout.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, ByteReader, Tensor};
use crate::tensor::{matmul_f32, MatrixF32, MatrixI8, PackedMatrix};

/// Divisor of the stage-one scale and the largest stage-one code magnitude.
pub const SYM_LEVELS: i32 = 119;

/// Largest inner dimension for which an `i32` accumulator of products of two
/// codes bounded by 127 cannot overflow.
pub const MAX_INNER_DIM: usize = 1 << 15;

/// Stage-one block: signed codes in `[-119, 119]` and one FP32 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlockQ1 {
    pub codes: MatrixI8,
    pub scale: f32,
}

impl QuantBlockQ1 {
    pub fn rows(&self) -> usize {
        self.codes.rows()
    }

    pub fn cols(&self) -> usize {
        self.codes.cols()
    }
}

/// `max|x| / 119`, or 1 for an all-zero input.
pub fn sym_scale(values: &[f32]) -> f32 {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max > 0.0 {
        max / SYM_LEVELS as f32
    } else {
        1.0
    }
}

/// Quantizes to stage-one codes with a caller-provided scale, clamping to ±119.
pub fn quantize_with_scale(values: &[f32], scale: f32) -> Vec<i8> {
    let lim = SYM_LEVELS as f32;
    values.iter().map(|&x| (x / scale).round().clamp(-lim, lim) as i8).collect()
}

pub fn sym_quant_int8(block: &MatrixF32) -> Result<QuantBlockQ1> {
    if block.is_empty() {
        return Err(Error::validation("cannot quantize an empty block"));
    }
    if block.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite value in block"));
    }
    let scale = sym_scale(block.data());
    let codes = quantize_with_scale(block.data(), scale);
    Ok(QuantBlockQ1 { codes: MatrixI8::new(block.rows(), block.cols(), codes)?, scale })
}

pub fn dequant_q1(q: &QuantBlockQ1) -> MatrixF32 {
    let data = q.codes.data().iter().map(|&c| c as f32 * q.scale).collect();
    MatrixF32::new(q.rows(), q.cols(), data).expect("shape preserved")
}

fn check_q2_bits(bits: u8) -> Result<()> {
    match bits {
        2 | 4 => Ok(()),
        b => Err(Error::validation(format!("stage-two width must be 2 or 4 bits, got {b}"))),
    }
}

/// Integer scale and zero point for one channel group.
///
/// `scale = max(1, ceil((max - min) / (2^bits - 1)))`, `zero = floor(min / scale)`.
fn asym_params(group: &[i8], bits: u8) -> (i32, i32) {
    let min = group.iter().copied().min().unwrap_or(0) as i32;
    let max = group.iter().copied().max().unwrap_or(0) as i32;
    let levels = (1i32 << bits) - 1;
    let scale = ((max - min) as u32).div_ceil(levels as u32).max(1) as i32;
    (scale, min.div_euclid(scale))
}

/// `clamp(round(v / scale - zero), 0, 2^bits - 1)` in integer arithmetic.
#[inline]
fn asym_code(v: i8, scale: i32, zero: i32, bits: u8) -> u8 {
    // zero * scale <= min <= v, so the numerator is non-negative
    let num = v as i32 - zero * scale;
    let q = (2 * num + scale) / (2 * scale);
    q.clamp(0, (1 << bits) - 1) as u8
}

#[inline]
fn asym_dequant(code: u8, scale: i32, zero: i32) -> i8 {
    ((code as i32 + zero) * scale).clamp(-127, 127) as i8
}

/// Stage-two group: one channel of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGroupQ2 {
    /// A single packed row holding the group's codes.
    pub codes: PackedMatrix,
    pub scale_int: i16,
    pub zero_int: i16,
    pub parent_scale: f32,
}

pub fn asym_quant_q2(group: &[i8], bits: u8, parent_scale: f32) -> Result<QuantGroupQ2> {
    check_q2_bits(bits)?;
    if group.is_empty() {
        return Err(Error::validation("cannot quantize an empty group"));
    }
    let (scale, zero) = asym_params(group, bits);
    let codes: Vec<u8> = group.iter().map(|&v| asym_code(v, scale, zero, bits)).collect();
    Ok(QuantGroupQ2 {
        codes: PackedMatrix::pack(1, group.len(), bits, &codes)?,
        scale_int: scale as i16,
        zero_int: zero as i16,
        parent_scale,
    })
}

pub fn dequant_q2_to_q1(g: &QuantGroupQ2) -> Vec<i8> {
    let (s, z) = (g.scale_int as i32, g.zero_int as i32);
    (0..g.codes.cols()).map(|c| asym_dequant(g.codes.get(0, c), s, z)).collect()
}

/// Stage-two compressed block: `rows` tokens by `cols` channels, one
/// asymmetric group per channel, sharing the stage-one `parent_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Q2Block {
    pub codes: PackedMatrix,
    pub scale_int: Vec<i16>,
    pub zero_int: Vec<i16>,
    pub parent_scale: f32,
}

impl Q2Block {
    /// Compresses every channel of `q1` independently.
    pub fn compress(q1: &MatrixI8, bits: u8, parent_scale: f32) -> Result<Self> {
        check_q2_bits(bits)?;
        let (rows, cols) = q1.shape();
        let mut codes = vec![0u8; rows * cols];
        let mut scale_int = Vec::with_capacity(cols);
        let mut zero_int = Vec::with_capacity(cols);
        for c in 0..cols {
            let group = q1.column(c);
            let (s, z) = asym_params(&group, bits);
            for (r, &v) in group.iter().enumerate() {
                codes[r * cols + c] = asym_code(v, s, z, bits);
            }
            scale_int.push(s as i16);
            zero_int.push(z as i16);
        }
        Ok(Self { codes: PackedMatrix::pack(rows, cols, bits, &codes)?, scale_int, zero_int, parent_scale })
    }

    pub fn rows(&self) -> usize {
        self.codes.rows()
    }

    pub fn cols(&self) -> usize {
        self.codes.cols()
    }

    pub fn bits(&self) -> u8 {
        self.codes.bits()
    }

    /// Reconstructs the INT8 codes; integer arithmetic only.
    pub fn dequant_to_q1(&self) -> MatrixI8 {
        let (rows, cols) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(asym_dequant(
                    self.codes.get(r, c),
                    self.scale_int[c] as i32,
                    self.zero_int[c] as i32,
                ));
            }
        }
        MatrixI8::new(rows, cols, out).expect("codes within [-127, 127]")
    }

    /// The group for channel `c`.
    pub fn group(&self, c: usize) -> QuantGroupQ2 {
        let codes: Vec<u8> = (0..self.rows()).map(|r| self.codes.get(r, c)).collect();
        QuantGroupQ2 {
            codes: PackedMatrix::pack(1, codes.len(), self.bits(), &codes).expect("valid codes"),
            scale_int: self.scale_int[c],
            zero_int: self.zero_int[c],
            parent_scale: self.parent_scale,
        }
    }

    /// Bytes of one sidecar record: `scale_int: i16, zero_int: i16, parent_scale: f32`.
    pub const SIDECAR_RECORD: usize = 8;

    pub fn encode_sidecar(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.cols() * Self::SIDECAR_RECORD);
        for (s, z) in self.scale_int.iter().zip(&self.zero_int) {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&z.to_le_bytes());
            out.extend_from_slice(&self.parent_scale.to_le_bytes());
        }
        out
    }

    /// Rebuilds a block from its packed codes and sidecar records.
    pub fn from_parts(codes: PackedMatrix, sidecar: &[u8]) -> Result<Self> {
        let cols = codes.cols();
        if sidecar.len() != cols * Self::SIDECAR_RECORD {
            return Err(Error::format(
                sidecar.len().min(cols * Self::SIDECAR_RECORD) as u64,
                format!("sidecar holds {} bytes, expected {}", sidecar.len(), cols * Self::SIDECAR_RECORD),
            ));
        }
        let mut r = ByteReader::new(sidecar);
        let mut scale_int = Vec::with_capacity(cols);
        let mut zero_int = Vec::with_capacity(cols);
        let mut parent = None;
        for _ in 0..cols {
            let at = r.offset() as u64;
            let s = r.i16()?;
            if s < 1 {
                return Err(Error::format(at, format!("integer scale {s} < 1")));
            }
            scale_int.push(s);
            zero_int.push(r.i16()?);
            let at = r.offset() as u64;
            let p = r.f32()?;
            match parent {
                None => parent = Some(p),
                Some(q) if q.to_bits() != p.to_bits() => {
                    return Err(Error::format(at, "parent scale differs between groups of one block"))
                }
                _ => {}
            }
        }
        Ok(Self { codes, scale_int, zero_int, parent_scale: parent.unwrap_or(1.0) })
    }

    /// Writes the packed codes as a `TQT1` file and the per-group records
    /// next to it.
    pub fn save(&self, codes_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        io::save_tensor(codes_path, &Tensor::Packed(self.codes.clone()))?;
        fs::write(sidecar_path, self.encode_sidecar())?;
        Ok(())
    }

    pub fn load(codes_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let codes = io::load_tensor(codes_path)?.into_packed()?;
        Self::from_parts(codes, &fs::read(sidecar_path)?)
    }
}

/// Raw `a * b^T` integer dot products; `a` is m x k, `b` is n x k.
pub fn int_dot_nt(a: &MatrixI8, b: &MatrixI8) -> Result<Vec<i32>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "integer matmul inner dims {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.cols() > MAX_INNER_DIM {
        return Err(Error::shape(format!("inner dim {} exceeds {MAX_INNER_DIM}", a.cols())));
    }
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            let acc: i32 = ar.iter().zip(b.row(j)).map(|(&x, &y)| x as i32 * y as i32).sum();
            out.push(acc);
        }
    }
    Ok(out)
}

fn transpose_i8(m: &MatrixI8) -> MatrixI8 {
    let (rows, cols) = m.shape();
    let data = (0..cols).flat_map(|c| (0..rows).map(move |r| m.get(r, c))).collect();
    MatrixI8::new(cols, rows, data).expect("transpose preserves codes")
}

fn scale_products(acc: &[i32], rows: usize, cols: usize, scale: f64) -> MatrixF32 {
    let data = acc.iter().map(|&v| (v as f64 * scale) as f32).collect();
    MatrixF32::new(rows, cols, data).expect("shape preserved")
}

/// `s_a * s_b * (A_codes * B_codes)` with integer accumulation; `a` is m x k,
/// `b` is k x n.
pub fn int_matmul_scaled(a: &QuantBlockQ1, b: &QuantBlockQ1) -> Result<MatrixF32> {
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let acc = int_dot_nt(&a.codes, &transpose_i8(&b.codes))?;
    Ok(scale_products(&acc, a.rows(), b.cols(), a.scale as f64 * b.scale as f64))
}

/// `s_a * s_b * (A_codes * B_codes^T)`; both operands are row-major with the
/// shared dimension as columns.
pub fn int_matmul_scaled_nt(a: &QuantBlockQ1, b: &QuantBlockQ1) -> Result<MatrixF32> {
    let acc = int_dot_nt(&a.codes, &b.codes)?;
    Ok(scale_products(&acc, a.rows(), b.rows(), a.scale as f64 * b.scale as f64))
}

/// Integer codes with a scalar scale and zero point; value = `code * scale + zero`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymOperand {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i32>,
    pub scale: f32,
    pub zero: f32,
}

impl AsymOperand {
    pub fn dequantize(&self) -> MatrixF32 {
        let data = self.codes.iter().map(|&q| q as f32 * self.scale + self.zero).collect();
        MatrixF32::new(self.rows, self.cols, data).expect("shape preserved")
    }
}

/// Product of two asymmetrically quantized matrices via the four-term
/// expansion
///
/// `s_a s_b ΣQ(A)Q(B) + s_a z_b ΣQ(A) + s_b z_a ΣQ(B) + k z_a z_b`
///
/// where `k` is the inner dimension.
pub fn asym_expansion_matmul(a: &AsymOperand, b: &AsymOperand) -> Result<MatrixF32> {
    if a.cols != b.rows || a.codes.len() != a.rows * a.cols || b.codes.len() != b.rows * b.cols {
        return Err(Error::shape(format!(
            "asymmetric matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let k = a.cols;
    let (sa, za, sb, zb) = (a.scale as f64, a.zero as f64, b.scale as f64, b.zero as f64);
    let row_sums: Vec<i64> =
        (0..a.rows).map(|i| a.codes[i * k..(i + 1) * k].iter().map(|&q| q as i64).sum()).collect();
    let col_sums: Vec<i64> =
        (0..b.cols).map(|j| (0..k).map(|t| b.codes[t * b.cols + j] as i64).sum()).collect();
    let mut out = MatrixF32::zeros(a.rows, b.cols);
    for (i, &rs) in row_sums.iter().enumerate() {
        for (j, &cs) in col_sums.iter().enumerate() {
            let dot: i64 = (0..k).map(|t| a.codes[i * k + t] as i64 * b.codes[t * b.cols + j] as i64).sum();
            let v = sa * sb * dot as f64
                + sa * zb * rs as f64
                + sb * za * cs as f64
                + k as f64 * za * zb;
            out.set(i, j, v as f32);
        }
    }
    Ok(out)
}

/// Dequantize-then-multiply route for the same product.
pub fn asym_dequant_matmul(a: &AsymOperand, b: &AsymOperand) -> Result<MatrixF32> {
    matmul_f32(&a.dequantize(), &b.dequantize())
}
