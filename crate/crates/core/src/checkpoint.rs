//! Binary network snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TCAM" | u32 version | u32 len | config JSON | u32 count
//! count × (u8 kind | u32 len | UTF-8 name | u32 rank | rank × u64 dim | f32 values)
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! `kind` is 0 for trainable parameters and 1 for running statistics.
//! Values are stored as 32-bit floats, so a loaded network holds the
//! single-precision rounding of the saved one, and re-saving a loaded
//! network reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::conformer::{Conformer, ConformerConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCAM";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, n: usize) {
    put_u32(out, u32::try_from(n).expect("section longer than 4 GiB"));
}

pub fn encode(model: &Conformer) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::Format(format!("config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_len(&mut out, config.len());
    out.extend_from_slice(&config);
    let tensors: Vec<(u8, &str, &Tensor)> = model
        .params()
        .iter()
        .map(|(n, t)| (KIND_PARAM, n, t))
        .chain(model.buffers().iter().map(|(n, t)| (KIND_BUFFER, n, t)))
        .collect();
    put_len(&mut out, tensors.len());
    for (kind, name, t) in tensors {
        out.push(kind);
        put_len(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.rank());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Conformer> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a TCAM checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let len = r.u32()? as usize;
    let config: ConformerConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("config: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for _ in 0..count {
        let kind = r.u8()?;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        let store = match kind {
            KIND_PARAM => &mut params,
            KIND_BUFFER => &mut buffers,
            k => return Err(Error::Format(format!("tensor `{name}` has unknown kind {k}"))),
        };
        if store.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Conformer::from_parts(config, params, buffers)
}

pub fn save(model: &Conformer, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Conformer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// `model` with every stored value rounded to single precision, which is
/// what a save/load cycle returns.
pub fn stored_precision(model: &Conformer) -> Conformer {
    let mut m = model.clone();
    let round = |store: &mut ParamStore| {
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    };
    round(m.params_mut());
    round(m.buffers_mut());
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ConformerConfig {
        ConformerConfig {
            num_blocks: 2,
            embed_dim: 8,
            num_heads: 2,
            grid: 2,
            stage_channels: vec![4, 8],
            stem_channels: 4,
            num_fg_classes: 2,
            image_size: 8,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn round_trip_is_value_exact_at_stored_precision() {
        let m = Conformer::new(tiny(), 5).unwrap();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, stored_precision(&m));
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tcam");
        let m = stored_precision(&Conformer::new(tiny(), 1).unwrap());
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = encode(&Conformer::new(tiny(), 0).unwrap()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn rejects_corruption_and_truncation() {
        let bytes = encode(&Conformer::new(tiny(), 0).unwrap()).unwrap();
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(decode(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(decode(&bytes[..bytes.len() - 9]).is_err());
        assert!(decode(b"PNG\0\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn starts_with_magic_and_version() {
        let bytes = encode(&Conformer::new(tiny(), 0).unwrap()).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }
}
