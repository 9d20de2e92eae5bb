//! The `VDTN` tensor container.
//!
//! Layout: magic `VDTN`, version byte, dtype byte (0 = f32), rank byte, a zero
//! byte, `rank` little-endian u64 extents, then the row-major little-endian
//! f32 payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const VDTN_MAGIC: &[u8; 4] = b"VDTN";
pub const VDTN_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_vdtn(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(VDTN_MAGIC);
    out.extend_from_slice(&[VDTN_VERSION, DTYPE_F32, rank, 0]);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_vdtn(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!("{} byte header, need 8", bytes.len())));
    }
    if &bytes[0..4] != VDTN_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != VDTN_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
    }
    if bytes[7] != 0 {
        return Err(Error::Format("reserved byte 7 is not zero".into()));
    }
    let rank = bytes[6] as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated extents".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut n: usize = 1;
    for chunk in bytes[8..header].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?;
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        dims.push(d);
    }
    let payload = &bytes[header..];
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            payload.len(),
            n * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_vdtn(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_vdtn(t)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_vdtn(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vdtn(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -0.0]).unwrap();
        let b = encode_vdtn(&t).unwrap();
        assert_eq!(&b[0..8], &[b'V', b'D', b'T', b'N', 1, 0, 2, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let good = encode_vdtn(&t).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_vdtn(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 1;
        assert!(decode_vdtn(&bad).is_err());
        assert!(decode_vdtn(&good[..good.len() - 1]).is_err());
        let mut zero_extent = good.clone();
        zero_extent[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(decode_vdtn(&zero_extent).is_err());
    }
}
