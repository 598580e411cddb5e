//! `DDN1` parameter container.
//!
//! Layout: the magic bytes `DDN1`, then one record per named tensor until end
//! of file: name length (u16 LE), UTF-8 name, rank (u32 LE), each dim (u32
//! LE), payload (f32 LE, row-major). Batch-norm running statistics live under
//! the `bn.` prefix, optimizer state under `adam.` and the correlation
//! baseline under `cca.`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDN1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| Error::Validation(format!("checkpoint has no entry {name:?}")))
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Validation(format!("parameter name too long: {} bytes", name.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Validation(format!("dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::format(path, msg);
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic, expected DDN1".into()));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let mut ck = Checkpoint::new();
        while cur.pos < bytes.len() {
            let len = u16::from_le_bytes(cur.take::<2>().ok_or_else(|| fail("truncated name length".into()))?);
            let name_bytes = cur.slice(len as usize).ok_or_else(|| fail("truncated name".into()))?;
            let name = std::str::from_utf8(name_bytes).map_err(|_| fail("name is not UTF-8".into()))?.to_string();
            let rank = u32::from_le_bytes(cur.take::<4>().ok_or_else(|| fail(format!("{name}: truncated rank")))?);
            let mut shape = Vec::with_capacity(rank as usize);
            let mut count: u64 = 1;
            for _ in 0..rank {
                let d = u32::from_le_bytes(cur.take::<4>().ok_or_else(|| fail(format!("{name}: truncated dims")))?);
                count = count.checked_mul(d as u64).ok_or_else(|| fail(format!("{name}: dimension overflow")))?;
                shape.push(d as usize);
            }
            let nbytes = count.checked_mul(4).filter(|&n| n <= (bytes.len() - cur.pos) as u64);
            let payload = nbytes
                .and_then(|n| cur.slice(n as usize))
                .ok_or_else(|| fail(format!("{name}: truncated payload")))?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| fail(format!("{name}: {e}")))?;
            ck.entries.push((name, t));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn slice(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.slice(N).map(|s| s.try_into().unwrap())
    }
}
