//! Binary checkpoints of named tensors.
//!
//! Layout (little-endian): magic `ACAS`, u32 version, then records until end
//! of file. A record is a u16 name length, the UTF-8 name, a u8 rank, `rank`
//! u32 dimensions and the f32 data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"ACAS";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = t.shape();
        out.push(4);
        for d in [s.batch, s.channels, s.height, s.width] {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} of {name} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn load_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Load {
        offset,
        msg: msg.into(),
    })
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *at < n {
        return load_err(*at, format!("truncated {what}"));
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

/// Parses a checkpoint. Ranks below 4 are left-padded with unit dimensions.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != MAGIC {
        return load_err(0, "not a checkpoint (bad magic)");
    }
    let v = take(bytes, &mut at, 4, "version")?;
    let version = u32::from_le_bytes([v[0], v[1], v[2], v[3]]);
    if version != VERSION {
        return load_err(4, format!("unsupported checkpoint version {version}"));
    }
    let mut out = Vec::new();
    while at < bytes.len() {
        let start = at;
        let l = take(bytes, &mut at, 2, "name length")?;
        let len = u16::from_le_bytes([l[0], l[1]]) as usize;
        let name = std::str::from_utf8(take(bytes, &mut at, len, "name")?)
            .map_err(|_| Error::Load {
                offset: start + 2,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank_at = at;
        let rank = take(bytes, &mut at, 1, "rank")?[0] as usize;
        if rank > 4 {
            return load_err(rank_at, format!("tensor {name} has rank {rank}, at most 4 supported"));
        }
        let mut dims = [1usize; 4];
        for i in 0..rank {
            let d = take(bytes, &mut at, 4, "dimension")?;
            dims[4 - rank + i] = u32::from_le_bytes([d[0], d[1], d[2], d[3]]) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = shape.numel();
        let data_at = at;
        let raw = take(bytes, &mut at, n.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Load {
            offset: data_at,
            msg: e.to_string(),
        })?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}
