//! `DFF1` feature blobs: magic `DFF1`, rank (u32 LE), each dim (u32 LE),
//! then the payload as f32 LE in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOB_MAGIC: &[u8; 4] = b"DFF1";

pub fn encode_feature_blob(tensor: &Tensor<f32>) -> Result<Vec<u8>> {
    tensor.validate_feature()?;
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Validation(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_blob(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 8 || &bytes[..4] != BLOB_MAGIC {
        return Err(Error::format(path, "bad magic, expected DFF1"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = rank
        .checked_mul(4)
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    if rank == 0 {
        return Err(Error::format(path, "rank 0 blob"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for c in bytes[8..header_end].chunks_exact(4) {
        let d = u32::from_le_bytes(c.try_into().unwrap());
        if d == 0 {
            return Err(Error::format(path, "zero dimension"));
        }
        count = count.checked_mul(d as u64).ok_or_else(|| Error::format(path, "dimension overflow"))?;
        shape.push(d as usize);
    }
    let payload = &bytes[header_end..];
    let expected = count.checked_mul(4).ok_or_else(|| Error::format(path, "dimension overflow"))?;
    if (payload.len() as u64) < expected {
        return Err(Error::format(
            path,
            format!("truncated payload: {shape:?} needs {count} floats, found {}", payload.len() / 4),
        ));
    }
    if payload.len() as u64 > expected {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_feature_blob(tensor: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_feature_blob(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_blob(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_blob(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_back_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dff");
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        write_feature_blob(&t, &p).unwrap();
        let back = read_feature_blob(&p).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.row_slice(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn wrong_magic_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.dff");
        fs::write(&p, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = read_feature_blob(&p).unwrap_err().to_string();
        assert!(err.contains("bad.dff") && err.contains("magic"), "{err}");
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut b = BLOB_MAGIC.to_vec();
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&3u32.to_le_bytes());
        for v in 0..5 {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let err = decode_feature_blob(&b, Path::new("t.dff")).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn huge_dims_overflow_cleanly() {
        let mut b = BLOB_MAGIC.to_vec();
        b.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_feature_blob(&b, Path::new("o.dff")).is_err());
    }

    #[test]
    fn empty_dimension_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::new(vec![0, 5], vec![]).unwrap();
        let err = write_feature_blob(&t, &dir.path().join("e.dff")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn single_value_payload_bytes() {
        let t = Tensor::new(vec![1, 1], vec![3.5f32]).unwrap();
        let b = encode_feature_blob(&t).unwrap();
        assert_eq!(&b[b.len() - 4..], &[0x00, 0x00, 0x60, 0x40]);
        assert_eq!(b.len(), 4 + 4 + 8 + 4);
    }
}
