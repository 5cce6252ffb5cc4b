//! Raw grid dump format for prediction and ground-truth grids.
//!
//! Layout: magic `CASPGRID`, version `u32 = 1`, `u32` rank, one `u32`
//! extent per dimension, then the row-major little-endian `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::GridTensor;

pub const GRID_MAGIC: &[u8; 8] = b"CASPGRID";
pub const GRID_VERSION: u32 = 1;

pub fn write_grid<W: Write>(mut w: W, grid: &GridTensor<f32>) -> Result<()> {
    w.write_all(GRID_MAGIC)?;
    w.write_all(&GRID_VERSION.to_le_bytes())?;
    w.write_all(&(grid.shape().len() as u32).to_le_bytes())?;
    for &d in grid.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in grid.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_grid(path: &Path, grid: &GridTensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<GridTensor<f32>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::input("grid dump too short for magic"))?;
    if &magic != GRID_MAGIC {
        return Err(Error::input(format!(
            "bad grid magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(GRID_MAGIC)
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != GRID_VERSION {
        return Err(Error::input(format!(
            "unsupported grid version {version}, expected {GRID_VERSION}"
        )));
    }
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::input("truncated grid payload"))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    GridTensor::new(shape, data)
}

pub fn load_grid(path: &Path) -> Result<GridTensor<f32>> {
    let r = BufReader::new(File::open(path)?);
    read_grid(r)
}
