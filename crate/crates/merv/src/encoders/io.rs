//! Binary tensor container.
//!
//! Layout: magic `MERVFTR1` (8 bytes) | u8 dtype code (1 = f32) | u8 rank |
//! rank x u32 little-endian extents | payload of f32 little-endian values,
//! row-major. Round-trips are bit-exact; trailing bytes are rejected.

use crate::error::{MervError, Result};
use crate::numerics::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MERVFTR1";
pub const DTYPE_F32: u8 = 1;

pub fn encode_feature(tensor: &Tensor<f32>) -> Result<Vec<u8>> {
    if tensor.rank() > u8::MAX as usize {
        return Err(MervError::format("tensor rank exceeds container limit".to_string()));
    }
    for &e in tensor.shape() {
        if e > u32::MAX as usize {
            return Err(MervError::format("extent exceeds u32".to_string()));
        }
    }
    let mut out = Vec::with_capacity(10 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cursor = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut cursor, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(MervError::format(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            magic
        )));
    }
    let mut byte = [0u8; 1];
    read_exact(&mut cursor, &mut byte, "dtype")?;
    if byte[0] != DTYPE_F32 {
        return Err(MervError::format(format!("unsupported dtype code {}", byte[0])));
    }
    read_exact(&mut cursor, &mut byte, "rank")?;
    let rank = byte[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 4];
        read_exact(&mut cursor, &mut ext, "extent")?;
        shape.push(u32::from_le_bytes(ext) as usize);
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(MervError::format(format!("zero extent in header {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if cursor.len() != numel * 4 {
        return Err(MervError::format(format!(
            "payload holds {} bytes, header implies {}",
            cursor.len(),
            numel * 4
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in cursor.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Tensor::new(shape, data)
}

fn read_exact(cursor: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    if cursor.len() < buf.len() {
        return Err(MervError::format(format!("truncated file while reading {what}")));
    }
    Read::read_exact(cursor, buf).map_err(|e| MervError::format(format!("{what}: {e}")))
}

pub fn write_feature(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let bytes = encode_feature(tensor)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_feature(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    decode_feature(&bytes)
}

/// Reads a rank-4 `(T, H, W, 3)` container as a video clip.
pub fn read_video(path: &Path) -> Result<super::VideoTensor> {
    let t = read_feature(path)?;
    super::VideoTensor::from_tensor(&t)
}

pub fn write_video(path: &Path, video: &super::VideoTensor) -> Result<()> {
    write_feature(path, &video.to_tensor())
}
