//! Raw tensor file (RTF) serialization.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "RTF1"
//! rank    u32
//! extents rank × u32
//! values  product(extents) × f32, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RTF1";

/// Serialize a tensor into the RTF byte layout.
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 4 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parse a tensor from RTF bytes, validating magic, extents, payload length,
/// and value finiteness (via the [`Tensor`] constructor).
pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let bad = |reason: String| Error::TensorFile {
        path: "<bytes>".into(),
        reason,
    };
    let mut r = io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected \"RTF1\"")));
    }
    let rank = read_u32(&mut r).map_err(|_| bad("truncated rank".into()))? as usize;
    if rank == 0 || rank > 8 {
        return Err(bad(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r).map_err(|_| bad("truncated extents".into()))? as usize);
    }
    let count: usize = shape.iter().product();
    let expected = count.checked_mul(4).ok_or_else(|| bad("extent overflow".into()))?;
    let offset = r.position() as usize;
    let payload = &bytes[offset..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, shape {shape:?} requires {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Write a tensor to `path` in RTF format.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(t)).map_err(|e| Error::io(path, e))
}

/// Read a tensor from an RTF file at `path`.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::TensorFile { reason, .. } => Error::TensorFile {
            path: path.into(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_pinned() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = to_bytes(&t);
        let mut want = Vec::new();
        want.extend_from_slice(b"RTF1");
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_preserves_bits() {
        let t = Tensor::new(
            vec![2, 3, 2],
            vec![
                0.1, -0.2, 3.25, 1e-20, -1e20, 0.0, 7.5, -0.125, 2.0, 4.0, -6.5, 9.0,
            ],
        )
        .unwrap();
        let back = from_bytes(&to_bytes(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rtf");
        let t = Tensor::new(vec![3, 4], (0..12).map(|i| i as f32 * 0.5).collect()).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(from_bytes(b"RTX1").is_err(), "bad magic");
        assert!(from_bytes(b"RTF1\x01\x00\x00\x00").is_err(), "no extents");
        // Correct header for [2] but only one value present.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RTF1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(from_bytes(&bytes).is_err(), "truncated payload");
        // NaN payload is rejected by the tensor constructor.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RTF1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(from_bytes(&bytes).is_err(), "non-finite value");
    }
}
