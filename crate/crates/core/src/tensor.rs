//! Dense row-major matrices and sub-byte code packing.

use crate::error::{Error, Result};

/// Dense row-major FP32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixF32 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl MatrixF32 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`MatrixF32::new`] but also rejects NaN and infinities.
    pub fn new_finite(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite value at element {pos}")));
        }
        Self::new(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> MatrixF32 {
        assert!(start <= end && end <= self.rows, "row range {start}..{end} out of {}", self.rows);
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> MatrixF32 {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &MatrixF32) -> Result<MatrixF32> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "vstack of {} and {} columns",
                self.cols, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self { rows: self.rows + other.rows, cols: self.cols, data })
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[MatrixF32]) -> Result<MatrixF32> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::shape("hstack of matrices with different row counts"));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(format!("row of width {} into {} columns", row.len(), self.cols)));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Dense row-major matrix of signed 8-bit codes in `[-127, 127]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixI8 {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl MatrixI8 {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} codes, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&c| c == i8::MIN) {
            return Err(Error::validation(format!("code -128 at element {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Column `c` as a contiguous vector.
    pub fn column(&self, c: usize) -> Vec<i8> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Row-major matrix of unsigned 2- or 4-bit codes, packed LSB-first.
///
/// Each row occupies `ceil(cols * bits / 8)` bytes; the element with the lowest
/// column index sits in the least-significant bits of its byte. Padding bits in
/// the last byte of a row are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedMatrix {
    rows: usize,
    cols: usize,
    bits: u8,
    data: Vec<u8>,
}

impl PackedMatrix {
    pub fn row_bytes(cols: usize, bits: u8) -> usize {
        (cols * bits as usize).div_ceil(8)
    }

    fn check_bits(bits: u8) -> Result<()> {
        match bits {
            2 | 4 => Ok(()),
            other => Err(Error::validation(format!("packed width must be 2 or 4 bits, got {other}"))),
        }
    }

    /// Packs row-major `codes` (one code per byte).
    pub fn pack(rows: usize, cols: usize, bits: u8, codes: &[u8]) -> Result<Self> {
        Self::check_bits(bits)?;
        if codes.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} packed matrix needs {} codes, got {}",
                rows * cols,
                codes.len()
            )));
        }
        let max = (1u8 << bits) - 1;
        if let Some(pos) = codes.iter().position(|&c| c > max) {
            return Err(Error::validation(format!(
                "code {} at element {pos} exceeds {bits}-bit range",
                codes[pos]
            )));
        }
        let per_byte = 8 / bits as usize;
        let row_bytes = Self::row_bytes(cols, bits);
        let mut data = vec![0u8; rows * row_bytes];
        for r in 0..rows {
            let out = &mut data[r * row_bytes..(r + 1) * row_bytes];
            for (c, &code) in codes[r * cols..(r + 1) * cols].iter().enumerate() {
                out[c / per_byte] |= code << ((c % per_byte) * bits as usize);
            }
        }
        Ok(Self { rows, cols, bits, data })
    }

    /// Wraps already-packed bytes.
    pub fn from_packed(rows: usize, cols: usize, bits: u8, data: Vec<u8>) -> Result<Self> {
        Self::check_bits(bits)?;
        let expected = rows * Self::row_bytes(cols, bits);
        if data.len() != expected {
            return Err(Error::shape(format!(
                "{rows}x{cols} at {bits} bits needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, bits, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        let bits = self.bits as usize;
        let per_byte = 8 / bits;
        let byte = self.data[r * Self::row_bytes(self.cols, self.bits) + c / per_byte];
        (byte >> ((c % per_byte) * bits)) & ((1u8 << bits) - 1)
    }

    /// Unpacks to one code per byte, row-major.
    pub fn unpack(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.get(r, c));
            }
        }
        out
    }
}

/// `a * b` with every dot product accumulated in FP64 and rounded once.
pub fn matmul_f32(a: &MatrixF32, b: &MatrixF32) -> Result<MatrixF32> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = MatrixF32::zeros(a.rows, b.cols);
    let mut acc = vec![0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, &av) in a.row(i).iter().enumerate() {
            let av = av as f64;
            for (slot, &bv) in acc.iter_mut().zip(b.row(k)) {
                *slot += av * bv as f64;
            }
        }
        for (o, v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
    Ok(out)
}
