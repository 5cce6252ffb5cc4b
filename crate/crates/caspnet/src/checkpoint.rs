//! Named-tensor checkpoint container.
//!
//! Layout: magic `CASPCKPT`, version `u32 = 1` (little endian), then a
//! record per tensor until EOF. Each record is a length-prefixed UTF-8
//! name, a dtype byte (0 = f32, 1 = f64), a `u32` rank, one `u32` extent
//! per dimension and the row-major little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, GridTensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CASPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One stored tensor; the container mixes element types freely.
#[derive(Debug, Clone)]
pub enum Record {
    F32(GridTensor<f32>),
    F64(GridTensor<f64>),
}

impl Record {
    pub fn dtype(&self) -> Dtype {
        match self {
            Record::F32(_) => Dtype::F32,
            Record::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Record::F32(t) => t.shape(),
            Record::F64(t) => t.shape(),
        }
    }

    pub fn as_f32(&self) -> Result<&GridTensor<f32>> {
        match self {
            Record::F32(t) => Ok(t),
            Record::F64(_) => Err(Error::config("record holds f64, expected f32")),
        }
    }

    pub fn as_f64(&self) -> Result<&GridTensor<f64>> {
        match self {
            Record::F64(t) => Ok(t),
            Record::F32(_) => Err(Error::config("record holds f32, expected f64")),
        }
    }

    /// Scalar record regardless of stored dtype.
    pub fn scalar_value(&self) -> Result<f64> {
        let n = match self {
            Record::F32(t) => t.numel(),
            Record::F64(t) => t.numel(),
        };
        if n != 1 {
            return Err(Error::config(format!(
                "expected scalar record, got shape {:?}",
                self.shape()
            )));
        }
        Ok(match self {
            Record::F32(t) => t.item() as f64,
            Record::F64(t) => t.item(),
        })
    }
}

impl From<GridTensor<f32>> for Record {
    fn from(t: GridTensor<f32>) -> Self {
        Record::F32(t)
    }
}

impl From<GridTensor<f64>> for Record {
    fn from(t: GridTensor<f64>) -> Self {
        Record::F64(t)
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, records: &[(String, Record)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, rec) in records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[rec.dtype() as u8])?;
        let shape = rec.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match rec {
            Record::F32(t) => {
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Record::F64(t) => {
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, records: &[(String, Record)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, records)?;
    w.flush()?;
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::input("truncated checkpoint record"));
        }
        filled += n;
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    if !read_exact_or_eof(r, &mut b)? {
        return Err(Error::input("unexpected end of checkpoint"));
    }
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Record)>> {
    let mut magic = [0u8; 8];
    if !read_exact_or_eof(&mut r, &mut magic)? || &magic != CHECKPOINT_MAGIC {
        return Err(Error::input(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CHECKPOINT_MAGIC)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::input(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut records = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len_buf)? {
            break;
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        if !read_exact_or_eof(&mut r, &mut name_buf)? {
            return Err(Error::input("truncated checkpoint record name"));
        }
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::input("checkpoint record name is not UTF-8"))?;
        let mut dtype_buf = [0u8; 1];
        if !read_exact_or_eof(&mut r, &mut dtype_buf)? {
            return Err(Error::input("truncated checkpoint record"));
        }
        let dtype = Dtype::from_code(dtype_buf[0])?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let rec = match dtype {
            Dtype::F32 => {
                let mut payload = vec![0u8; numel * 4];
                if !read_exact_or_eof(&mut r, &mut payload)? && numel > 0 {
                    return Err(Error::input("truncated checkpoint payload"));
                }
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Record::F32(GridTensor::new(shape, data)?)
            }
            Dtype::F64 => {
                let mut payload = vec![0u8; numel * 8];
                if !read_exact_or_eof(&mut r, &mut payload)? && numel > 0 {
                    return Err(Error::input("truncated checkpoint payload"));
                }
                let data = payload
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect();
                Record::F64(GridTensor::new(shape, data)?)
            }
        };
        records.push((name, rec));
    }
    Ok(records)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Record)>> {
    let r = BufReader::new(File::open(path)?);
    read_checkpoint(r)
}
