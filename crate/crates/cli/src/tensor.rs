//! On-disk tensor format.
//!
//! Layout: magic `SGT1`, rank as little-endian u32, `rank` dims as u32, then
//! the payload as row-major little-endian IEEE-754 f32. Computation stays in
//! f64; only persisted tensors are narrowed.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SGT1";

#[derive(Debug)]
pub enum TensorError {
    Io(io::Error),
    BadMagic,
    Truncated,
    DimOverflow,
}

impl std::fmt::Display for TensorError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TensorError::Io(e) => write!(f, "io error: {e}"),
            TensorError::BadMagic => write!(f, "not an SGT1 tensor file"),
            TensorError::Truncated => write!(f, "tensor payload shorter than its dims"),
            TensorError::DimOverflow => write!(f, "tensor dims overflow u32"),
        }
    }
}

impl std::error::Error for TensorError {}

impl From<io::Error> for TensorError {
    fn from(e: io::Error) -> Self {
        TensorError::Io(e)
    }
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<(), TensorError> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&u32::try_from(dims.len()).map_err(|_| TensorError::DimOverflow)?.to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&u32::try_from(d).map_err(|_| TensorError::DimOverflow)?.to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(TensorError::Truncated);
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(TensorError::Truncated);
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_payload_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sgt");
        let data: Vec<f64> = (0..24).map(|i| (i as f64) * 0.37 - 1.5).collect();
        write_tensor(&path, &[2, 3, 4], &data).unwrap();
        let (dims, back) = read_tensor(&path).unwrap();
        assert_eq!(dims, vec![2, 3, 4]);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
        // Writing the readback again is byte-identical.
        let path2 = dir.path().join("t2.sgt");
        write_tensor(&path2, &dims, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sgt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(read_tensor(&path), Err(TensorError::BadMagic)));
    }
}
