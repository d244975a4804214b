//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   9 bytes  "RUSPCKPT1"
//! version u64      policy version tag (training iteration)
//! count   u32      number of named arrays
//! count * [ name_len u32 | name UTF-8 | rank u32 | dims u64 * rank |
//!           payload f32-LE * prod(dims) ]
//! ```
//!
//! Everything a run needs lives in the array list under path-like names:
//! `policy/...` and `value/...` parameters, `adam/...` moments, `norm/...`
//! normalizer statistics, plus scalar counters. 64-bit state (normalizer
//! moments, step counters) is stored bit-split into pairs of f32 words so
//! the payload stays 32-bit and round-trips are byte-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"RUSPCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub version: u64,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl CheckpointData {
    pub fn new(version: u64) -> Self {
        CheckpointData { version, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push((name.into(), shape, data));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, value: u64) {
        self.push(name, vec![2], split_u64(value).to_vec());
    }

    pub fn push_f64s(&mut self, name: impl Into<String>, values: &[f64]) {
        let mut out = Vec::with_capacity(values.len() * 2);
        for &v in values {
            out.extend_from_slice(&split_u64(v.to_bits()));
        }
        self.push(name, vec![values.len(), 2], out);
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, data)| (shape.as_slice(), data.as_slice()))
    }

    pub fn require(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let (_, data) = self.require(name)?;
        if data.len() != 2 {
            return Err(Error::Checkpoint(format!("'{name}' is not a u64 cell")));
        }
        Ok(join_u64([data[0], data[1]]))
    }

    pub fn get_f64s(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, data) = self.require(name)?;
        if shape.last() != Some(&2) {
            return Err(Error::Checkpoint(format!("'{name}' is not an f64 vector")));
        }
        Ok(data
            .chunks(2)
            .map(|pair| f64::from_bits(join_u64([pair[0], pair[1]])))
            .collect())
    }
}

fn split_u64(v: u64) -> [f32; 2] {
    [f32::from_bits((v & 0xffff_ffff) as u32), f32::from_bits((v >> 32) as u32)]
}

fn join_u64(pair: [f32; 2]) -> u64 {
    (pair[0].to_bits() as u64) | ((pair[1].to_bits() as u64) << 32)
}

pub fn write_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&data.version.to_le_bytes())?;
    w.write_all(&(data.arrays.len() as u32).to_le_bytes())?;
    for (name, shape, values) in &data.arrays {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut payload = vec![0u8; len * 4];
        r.read_exact(&mut payload)?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push((name, shape, values));
    }
    Ok(CheckpointData { version, arrays })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
