//! Named-tensor checkpoints.
//!
//! ```text
//! "TSKD" | u32 version | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | rank x u64 extents | f32 data
//! ```
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TSKD";
pub const VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(
        &(u32::try_from(tensors.len()).map_err(|_| Error::contract("too many tensors"))?)
            .to_le_bytes(),
    );
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(Error::contract("tensor names must be non-empty"));
        }
        if !seen.insert(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank =
            u8::try_from(t.rank()).map_err(|_| Error::contract("tensor rank exceeds 255"))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "checkpoint magic {magic:02x?}, expected \"TSKD\""
        )));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        if name.is_empty() {
            return Err(Error::Format("empty tensor name".into()));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.array()?);
            shape.push(
                usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?,
            );
        }
        let byte_len = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("extents {shape:?} of `{name}` overflow")))?;
        let raw = r.take(byte_len)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_checkpoint<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let bytes = encode(tensors)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Save a parameter store, casting to `f32`.
pub fn save_params<T: Real>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    let cast: Vec<(&str, Tensor<f32>)> = params.iter().map(|(n, t)| (n, t.cast())).collect();
    save_checkpoint(path, cast.iter().map(|(n, t)| (*n, t)))
}

pub fn load_params<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for (name, t) in load_checkpoint(path)? {
        store.push(name, t.cast())?;
    }
    Ok(store)
}
