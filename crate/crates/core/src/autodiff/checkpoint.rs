//! Flat binary parameter files.
//!
//! Layout (all integers u64 little-endian, values f64 little-endian):
//! `magic[8] count { name_len name[name_len] rank dims[rank] values[prod(dims)] }*`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 8] = b"TSPARAM1";

const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!(
                "array {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self { name: name.into(), shape: vec![n], data }
    }
}

pub fn write_params_to<W: Write>(w: &mut W, arrays: &[NamedArray]) -> std::io::Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&(arrays.len() as u64).to_le_bytes())?;
    for a in arrays {
        w.write_all(&(a.name.len() as u64).to_le_bytes())?;
        w.write_all(a.name.as_bytes())?;
        w.write_all(&(a.shape.len() as u64).to_le_bytes())?;
        for &d in &a.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Decode a parameter stream; `Err(msg)` describes the first inconsistency.
pub fn read_params_from<R: Read>(r: &mut R) -> std::result::Result<Vec<NamedArray>, String> {
    let io = |e: std::io::Error| format!("truncated or unreadable: {e}");
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != PARAM_MAGIC {
        return Err("bad magic".into());
    }
    let count = read_u64(r).map_err(io)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(r).map_err(io)?;
        if len > MAX_NAME {
            return Err(format!("name length {len} too large"));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| "array name is not UTF-8".to_string())?;
        let rank = read_u64(r).map_err(io)?;
        if rank > MAX_RANK {
            return Err(format!("array {name}: rank {rank} too large"));
        }
        let shape: Vec<usize> = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<std::io::Result<_>>().map_err(io)?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("array {name}: shape overflow"))?;
        let mut bytes = Vec::new();
        r.take(8 * n as u64).read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() != 8 * n {
            return Err(format!("array {name}: expected {n} values, file ends early"));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(NamedArray { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err("trailing bytes after last array".into());
    }
    Ok(out)
}

pub fn write_params(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_params_to(&mut w, arrays).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<Vec<NamedArray>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params_from(&mut BufReader::new(f)).map_err(|msg| Error::CorruptFile { path: path.into(), msg })
}
