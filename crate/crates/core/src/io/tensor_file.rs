use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MRST";
pub const TENSOR_VERSION: u8 = 1;

/// Always written at rank 4.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 16 + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(4);
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Ranks below 4 are padded with leading unit dimensions.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let err = |m: String| Error::Format(m);
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(err("magic: expected \"MRST\"".into()));
    }
    if bytes.len() < 6 {
        return Err(err("rank: file ends before version and rank".into()));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(err(format!("version: unsupported tensor file version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if !(1..=4).contains(&rank) {
        return Err(err(format!("rank: {rank} is outside 1..=4")));
    }
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(err("dims: file ends inside the dimension list".into()));
    }
    let mut shape = [1usize; 4];
    for (k, c) in bytes[6..dims_end].chunks_exact(4).enumerate() {
        shape[4 - rank + k] = u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize;
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != 4 * count {
        return Err(err(format!("payload length: expected {} bytes for {:?}, found {}", 4 * count, shape, payload.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, tensor_to_bytes(t))?)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    tensor_from_bytes(&std::fs::read(path)?)
}
