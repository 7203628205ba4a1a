//! Flat tensor files: `"EMFT" | rank u32 | rank x dim u32 | f32 data`, all
//! little-endian.

use std::path::Path;

use crate::error::{EmfError, Location, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"EMFT";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let err = |at: usize, m: &str| EmfError::Format {
        path: None,
        location: Location::Byte(at as u64),
        message: m.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
        return Err(err(0, "missing \"EMFT\" header"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank > 4 {
        return Err(err(4, "rank above 4"));
    }
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(err(bytes.len(), "truncated dimensions"));
    }
    let shape: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() - dims_end != 4 * n {
        return Err(err(dims_end, "data length does not match dimensions"));
    }
    let data = bytes[dims_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| EmfError::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        EmfError::Format {
            location, message, ..
        } => EmfError::Format {
            path: Some(path.to_path_buf()),
            location,
            message,
        },
        other => other,
    })
}
