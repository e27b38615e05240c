//! `DARY` v1 binary format.
//!
//! Layout: the ASCII magic `DARY`, then little-endian `u32` version (= 1),
//! `u32 n`, `u32 d`, followed by `n·d` little-endian `f64` values in
//! element-major order. Rotation matrices are stored with `n = d` (one row per
//! element). Plain real vectors and weight matrices reuse the same container
//! with `d` set to the row width, which may be 1.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rotation::RotationMatrix;
use crate::tensor::DAryTensor;

pub const MAGIC: &[u8; 4] = b"DARY";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Raw contents of a DARY file.
#[derive(Debug, Clone, PartialEq)]
pub struct DaryPayload {
    pub n: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl DaryPayload {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::shape(format!("DARY payload needs n, d >= 1 (got n={n}, d={d})")));
        }
        if values.len() != n * d {
            return Err(Error::shape(format!(
                "DARY payload n={n}, d={d} needs {} values, got {}",
                n * d,
                values.len()
            )));
        }
        if n > u32::MAX as usize || d > u32::MAX as usize {
            return Err(Error::shape("DARY dimensions exceed u32"));
        }
        Ok(DaryPayload { n, d, values })
    }

    pub fn from_vector(v: &[f64]) -> Result<Self> {
        DaryPayload::new(v.len(), 1, v.to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("DARY header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad DARY magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported DARY version {version}")));
        }
        let n = word(8) as usize;
        let d = word(12) as usize;
        let expected = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format("DARY dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "DARY body length mismatch: header says n={n}, d={d} ({expected} bytes), file has {}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("DARY payload contains non-finite values".into()));
        }
        DaryPayload::new(n, d, values).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn into_tensor(self) -> Result<DAryTensor> {
        DAryTensor::new(self.n, self.d, self.values)
    }

    pub fn into_rotation(self) -> Result<RotationMatrix> {
        if self.n != self.d {
            return Err(Error::shape(format!(
                "rotation payload must be square, got n={}, d={}",
                self.n, self.d
            )));
        }
        RotationMatrix::from_matrix(Matrix::new(self.n, self.d, self.values)?)
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        Matrix::new(self.n, self.d, self.values)
    }
}

impl From<&DAryTensor> for DaryPayload {
    fn from(t: &DAryTensor) -> Self {
        DaryPayload {
            n: t.n(),
            d: t.d(),
            values: t.data().to_vec(),
        }
    }
}

impl From<&RotationMatrix> for DaryPayload {
    fn from(r: &RotationMatrix) -> Self {
        DaryPayload {
            n: r.d(),
            d: r.d(),
            values: r.entries().to_vec(),
        }
    }
}

impl From<&Matrix> for DaryPayload {
    fn from(m: &Matrix) -> Self {
        DaryPayload {
            n: m.rows(),
            d: m.cols(),
            values: m.data().to_vec(),
        }
    }
}

pub fn read_file(path: &Path) -> Result<DaryPayload> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DaryPayload::from_bytes(&bytes)
}

pub fn write_file(path: &Path, payload: &DaryPayload) -> Result<()> {
    write_atomic(path, &payload.to_bytes())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
