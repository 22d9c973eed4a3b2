//! Named-tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SNTE"            4 bytes magic
//! version: u32      = 1
//! count: u32
//! count × {
//!     name_len: u16, name: UTF-8
//!     ndim: u32, dims: u32 × ndim
//!     payload: f32 × product(dims)
//! }
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"SNTE";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    VersionMismatch(u32),
    #[error("tensor file truncated or inconsistent: {0}")]
    TruncatedFile(String),
    #[error("dimension does not fit the file format: {0}")]
    DimOverflow(String),
    #[error("tensor `{0}` not found")]
    MissingTensor(String),
    #[error("tensor `{name}` has {ndim} dimensions, expected 2")]
    NotAMatrix { name: String, ndim: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor dims do not match data");
        Self { dims, data }
    }

    /// Narrows to `f32`.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self, name: &str) -> Result<Matrix, TensorIoError> {
        match self.dims.as_slice() {
            [r, c] => Ok(Matrix::from_vec(*r, *c, self.data.iter().map(|&v| f64::from(v)).collect())),
            [n] => Ok(Matrix::from_vec(1, *n, self.data.iter().map(|&v| f64::from(v)).collect())),
            _ => Err(TensorIoError::NotAMatrix {
                name: name.to_string(),
                ndim: self.dims.len(),
            }),
        }
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Rounds a matrix through `f32` so that it survives a file round-trip unchanged.
pub fn quantize(m: &Matrix) -> Matrix {
    m.map(|v| f64::from(v as f32))
}

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>, TensorIoError> {
    let count = u32::try_from(tensors.len()).map_err(|_| TensorIoError::DimOverflow("tensor count".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| TensorIoError::DimOverflow(format!("name of {} bytes", name.len())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u32::try_from(t.dims.len()).map_err(|_| TensorIoError::DimOverflow("ndim".into()))?;
        out.extend_from_slice(&ndim.to_le_bytes());
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| TensorIoError::DimOverflow(format!("dimension {d}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TensorIoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            TensorIoError::TruncatedFile(format!("{what} at byte {} needs {n} bytes", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, TensorIoError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, TensorIoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, TensorIoError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TensorIoError::VersionMismatch(version));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("name length")?;
        let name = std::str::from_utf8(r.take(usize::from(name_len), "name")?)
            .map_err(|_| TensorIoError::TruncatedFile("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u32("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| TensorIoError::DimOverflow(format!("{name}: {dims:?}")))?;
        let payload = r.take(n * 4, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor { dims, data }));
    }
    if r.pos != bytes.len() {
        return Err(TensorIoError::TruncatedFile(format!(
            "{} trailing bytes after the declared tensors",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), TensorIoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, TensorIoError> {
    decode(&fs::read(path)?)
}

pub fn write_matrices(path: &Path, named: &[(&str, &Matrix)]) -> Result<(), TensorIoError> {
    let tensors: Vec<(String, Tensor)> = named
        .iter()
        .map(|(n, m)| (n.to_string(), Tensor::from_matrix(m)))
        .collect();
    write_tensors(path, &tensors)
}

pub fn find_matrix(tensors: &[(String, Tensor)], name: &str) -> Result<Matrix, TensorIoError> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .ok_or_else(|| TensorIoError::MissingTensor(name.to_string()))
        .and_then(|(n, t)| t.to_matrix(n))
}

/// The first tensor in the file, as a matrix.
pub fn read_first_matrix(path: &Path) -> Result<Matrix, TensorIoError> {
    let tensors = read_tensors(path)?;
    let (name, t) = tensors
        .first()
        .ok_or_else(|| TensorIoError::MissingTensor("<any>".into()))?;
    t.to_matrix(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("audio".into(), Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25])),
            ("scalar".into(), Tensor::new(vec![], vec![42.0])),
            ("empty".into(), Tensor::new(vec![0, 4], vec![])),
        ]
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for ((na, a), (nb, b)) in sample().iter().zip(&back) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()[..1]).unwrap();
        assert_eq!(&bytes[..4], b"SNTE");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &5u16.to_le_bytes());
        assert_eq!(&bytes[14..19], b"audio");
        assert_eq!(bytes.len(), 19 + 4 + 8 + 6 * 4);
    }

    #[test]
    fn guards() {
        assert!(matches!(decode(b"NOPE\x01\0\0\0"), Err(TensorIoError::BadMagic)));
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(TensorIoError::VersionMismatch(2))));
        let bytes = encode(&sample()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(TensorIoError::TruncatedFile(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode(&extra), Err(TensorIoError::TruncatedFile(_))));
        let huge = Tensor {
            dims: vec![1usize << 33],
            data: vec![],
        };
        assert!(matches!(encode(&[("x".into(), huge)]), Err(TensorIoError::DimOverflow(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/clip.snte");
        let m = quantize(&Matrix::from_fn(4, 3, |i, j| (i as f64).sin() + j as f64 * 0.1));
        write_matrices(&path, &[("audio", &m)]).unwrap();
        let back = read_tensors(&path).unwrap();
        assert!(find_matrix(&back, "audio").unwrap().bit_eq(&m));
        assert!(matches!(find_matrix(&back, "video"), Err(TensorIoError::MissingTensor(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_roundtrip(
            rows in 0usize..6,
            cols in 0usize..6,
            seed in any::<u32>(),
            name in "[a-z_]{0,12}",
        ) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(vec![rows, cols], data);
            let back = decode(&encode(&[(name.clone(), t.clone())]).unwrap()).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            prop_assert!(back[0].1.bit_eq(&t));
        }
    }
}
