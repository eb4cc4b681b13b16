//! The `TNSR` binary record.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TNSR" | u8 version (=1) | u8 dtype (0 = f64, 1 = f32) | u8 ndim
//!        | ndim x u64 extents | row-major payload
//! ```
//!
//! f32 payloads are promoted to f64 on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Error::Format(format!("unknown TNSR dtype code {other}"))),
        }
    }
}

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("{} dimensions do not fit in a TNSR header", t.ndim())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype.code(), t.ndim() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"TNSR\"", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported TNSR version {}", head[4])));
    }
    let dtype = Dtype::from_code(head[5])?;
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "extent")?;
        let d = u64::from_le_bytes(b);
        if d == 0 || d > (1 << 40) {
            return Err(Error::Format(format!("implausible extent {d}")));
        }
        shape.push(d as usize);
    }
    let count: usize = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= (1 << 34))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} is too large")))?;
    let width = match dtype {
        Dtype::F64 => 8,
        Dtype::F32 => 4,
    };
    let mut raw = vec![0u8; count * width];
    read_exact(r, &mut raw, "payload")?;
    let data: Vec<f64> = match dtype {
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(shape, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated TNSR {what}")),
        _ => Error::Io(e),
    })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

/// Reads a file holding exactly one record.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor_from(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after TNSR record".into()));
    }
    Ok(t)
}
