//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `CSEG`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, name bytes, `u32` rank, `u32` dims,
//! and the values as 32-bit floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{invalid_input, Result};

const MAGIC: &[u8; 4] = b"CSEG";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write, T: Scalar>(mut out: W, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&(v.widen() as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read, T: Scalar>(mut input: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid_input("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(invalid_input(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid_input("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::cast(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(tensors)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
