//! The `TQT1` binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | field                                               |
//! |------------------|-----------------------------------------------------|
//! | 4                | magic `TQT1`                                        |
//! | u32              | dtype: 0 = FP32, 1 = I8, 2 = packed u4, 3 = packed u2 |
//! | u32              | ndim (1 or 2)                                       |
//! | ndim x u64       | dims, outermost first                               |
//! | u32 (packed only)| logical column count                                |
//! | ...              | row-major payload                                   |
//!
//! For packed dtypes the last dim is the packed byte width of a row and the
//! logical column count gives the number of codes per row. A 1-D tensor loads
//! as a single row.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{MatrixF32, MatrixI8, PackedMatrix};

pub const MAGIC: &[u8; 4] = b"TQT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 0,
    I8 = 1,
    PackedU4 = 2,
    PackedU2 = 3,
}

impl DType {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::PackedU4),
            3 => Some(DType::PackedU2),
            _ => None,
        }
    }
}

/// Any tensor the container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(MatrixF32),
    I8(MatrixI8),
    Packed(PackedMatrix),
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        match self {
            Tensor::F32(_) => DType::F32,
            Tensor::I8(_) => DType::I8,
            Tensor::Packed(p) if p.bits() == 4 => DType::PackedU4,
            Tensor::Packed(_) => DType::PackedU2,
        }
    }

    pub fn into_f32(self) -> Result<MatrixF32> {
        match self {
            Tensor::F32(m) => Ok(m),
            other => Err(Error::validation(format!("expected FP32 tensor, found {:?}", other.dtype()))),
        }
    }

    pub fn into_i8(self) -> Result<MatrixI8> {
        match self {
            Tensor::I8(m) => Ok(m),
            other => Err(Error::validation(format!("expected I8 tensor, found {:?}", other.dtype()))),
        }
    }

    pub fn into_packed(self) -> Result<PackedMatrix> {
        match self {
            Tensor::Packed(m) => Ok(m),
            other => Err(Error::validation(format!("expected packed tensor, found {:?}", other.dtype()))),
        }
    }
}

impl From<MatrixF32> for Tensor {
    fn from(m: MatrixF32) -> Self {
        Tensor::F32(m)
    }
}

impl From<MatrixI8> for Tensor {
    fn from(m: MatrixI8) -> Self {
        Tensor::I8(m)
    }
}

impl From<PackedMatrix> for Tensor {
    fn from(m: PackedMatrix) -> Self {
        Tensor::Packed(m)
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.dtype() as u32).to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    match t {
        Tensor::F32(m) => {
            put_dims(&mut out, m.rows(), m.cols());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::I8(m) => {
            put_dims(&mut out, m.rows(), m.cols());
            out.extend(m.data().iter().map(|&c| c as u8));
        }
        Tensor::Packed(p) => {
            put_dims(&mut out, p.rows(), PackedMatrix::row_bytes(p.cols(), p.bits()));
            out.extend_from_slice(&(p.cols() as u32).to_le_bytes());
            out.extend_from_slice(p.bytes());
        }
    }
    out
}

fn put_dims(out: &mut Vec<u8>, rows: usize, cols: usize) {
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let dtype_at = r.offset();
    let code = r.u32()?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(dtype_at as u64, format!("unknown dtype code {code}")))?;
    let ndim_at = r.offset();
    let ndim = r.u32()?;
    let (rows, cols) = match ndim {
        1 => (1, r.dim()?),
        2 => (r.dim()?, r.dim()?),
        n => return Err(Error::format(ndim_at as u64, format!("unsupported ndim {n}"))),
    };
    let tensor = match dtype {
        DType::F32 => {
            let at = r.offset();
            let raw = r.take_array(rows, cols, 4)?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let m = MatrixF32::new_finite(rows, cols, data)
                .map_err(|e| Error::format(at as u64, e.to_string()))?;
            Tensor::F32(m)
        }
        DType::I8 => {
            let at = r.offset();
            let raw = r.take_array(rows, cols, 1)?;
            let m = MatrixI8::new(rows, cols, raw.iter().map(|&b| b as i8).collect())
                .map_err(|e| Error::format(at as u64, e.to_string()))?;
            Tensor::I8(m)
        }
        DType::PackedU4 | DType::PackedU2 => {
            let bits = if dtype == DType::PackedU4 { 4 } else { 2 };
            let lc_at = r.offset();
            let logical = r.u32()? as usize;
            if PackedMatrix::row_bytes(logical, bits) != cols {
                return Err(Error::format(
                    lc_at as u64,
                    format!("{logical} logical columns do not fit a {cols}-byte row"),
                ));
            }
            let raw = r.take_array(rows, cols, 1)?;
            Tensor::Packed(PackedMatrix::from_packed(rows, logical, bits, raw.to_vec())?)
        }
    };
    if r.remaining() != 0 {
        return Err(Error::format(r.offset() as u64, format!("{} trailing bytes", r.remaining())));
    }
    Ok(tensor)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

/// Cursor over a byte slice that reports offsets on short reads.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_array(&mut self, rows: usize, cols: usize, width: usize) -> Result<&'a [u8]> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::format(self.pos as u64, "payload size overflows"))?;
        self.take(n)
    }

    fn dim(&mut self) -> Result<usize> {
        let at = self.pos;
        usize::try_from(self.u64()?).map_err(|_| Error::format(at as u64, "dimension too large"))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f32_roundtrip_is_bit_exact() {
        let m = MatrixF32::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tqt");
        save_tensor(&path, &m.clone().into()).unwrap();
        let back = load_tensor(&path).unwrap().into_f32().unwrap();
        assert_eq!(back.shape(), (2, 2));
        let bits = |m: &MatrixF32| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Tensor::I8(MatrixI8::new(1, 3, vec![-1, 0, 1]).unwrap()));
        assert_eq!(&bytes[0..4], b"TQT1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &3u64.to_le_bytes());
        assert_eq!(&bytes[28..], &[0xff, 0x00, 0x01]);

        let p = PackedMatrix::pack(1, 3, 2, &[1, 2, 3]).unwrap();
        let bytes = encode(&Tensor::Packed(p));
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &1u64.to_le_bytes());
        assert_eq!(&bytes[28..32], &3u32.to_le_bytes());
        assert_eq!(&bytes[32..], &[0b11_10_01]);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&Tensor::F32(MatrixF32::zeros(1, 1)));
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn bad_dtype() {
        let mut bytes = encode(&Tensor::F32(MatrixF32::zeros(1, 1)));
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        for i in 0..8 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        match decode(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 28);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_trailing_bytes_and_nan() {
        let mut bytes = encode(&Tensor::F32(MatrixF32::zeros(1, 1)));
        bytes.push(0);
        assert!(decode(&bytes).is_err());
        let bytes = encode(&Tensor::F32(MatrixF32::new(1, 1, vec![f32::NAN]).unwrap()));
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn one_dimensional_loads_as_row() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&[5, 0xfb]);
        let m = decode(&bytes).unwrap().into_i8().unwrap();
        assert_eq!(m.shape(), (1, 2));
        assert_eq!(m.data(), &[5, -5]);
    }

    proptest! {
        #[test]
        fn roundtrip_all_dtypes(rows in 0usize..5, cols in 0usize..9, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = MatrixF32::from_fn(rows, cols, |_, _| rng.random_range(-1e6f32..1e6));
            let i = MatrixI8::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-127i8..=127)).collect()).unwrap();
            let codes: Vec<u8> = (0..rows * cols).map(|_| rng.random_range(0..16u8)).collect();
            let p4 = PackedMatrix::pack(rows, cols, 4, &codes).unwrap();
            let p2 = PackedMatrix::pack(rows, cols, 2, &codes.iter().map(|c| c & 3).collect::<Vec<_>>()).unwrap();
            for t in [Tensor::F32(f), Tensor::I8(i), Tensor::Packed(p4), Tensor::Packed(p2)] {
                let bytes = encode(&t);
                let back = decode(&bytes).unwrap();
                prop_assert_eq!(encode(&back), bytes);
            }
        }
    }
}
