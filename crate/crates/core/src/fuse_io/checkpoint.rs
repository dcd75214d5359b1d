//! `HPF1` parameter container.
//!
//! Layout: the 4-byte magic `HPF1`, then for each tensor until end of file:
//! name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u64 LE each),
//! values (f64 LE, row-major).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"HPF1";

/// Named parameters in a deterministic (sorted) order.
pub type ParamSet = BTreeMap<String, Tensor>;

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic (expected HPF1)".into()));
    }
    let mut r = Reader { buf: bytes, at: 4 };
    let mut params = ParamSet::new();
    while r.at < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("{name}: dims {dims:?} overflow")))?;
        let raw = r.take(count * 8, "values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t =
            Tensor::new(&dims, values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_is_header_only() {
        let bytes = encode_checkpoint(&ParamSet::new());
        assert_eq!(bytes, b"HPF1");
        assert!(decode_checkpoint(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_tensor_layout() {
        let mut p = ParamSet::new();
        p.insert(
            "w".into(),
            Tensor::new(&[2, 2], vec![1.0, -2.5, 3.0, 1e-300]).unwrap(),
        );
        let bytes = encode_checkpoint(&p);
        assert_eq!(bytes.len(), 4 + 4 + 1 + 4 + 16 + 32);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], b'w');
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
    }

    #[test]
    fn corrupted_magic_and_truncation() {
        let mut p = ParamSet::new();
        p.insert("b".into(), Tensor::vector(&[1.0, 2.0]));
        let mut bytes = encode_checkpoint(&p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
