//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `MVDCKPT1`, then one record per tensor:
//! `u32 name_len, name bytes, u32 ndims, ndims × u32 dims, f32 data`, all
//! little-endian. Loading validates the whole file against the target
//! parameter sets before assigning anything.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::layers::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MVDCKPT1";

pub fn encode<T: Real>(sets: &[&ParamSet<T>]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for set in sets {
        for (name, t) in set.names.iter().zip(&set.tensors) {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend((x.as_f64() as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Writes to a sibling temp file and renames it into place.
pub fn save<T: Real>(path: &Path, sets: &[&ParamSet<T>]) -> Result<()> {
    let bytes = encode(sets);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parses every record; fails on truncation or malformed headers.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let err = |msg: String| NnError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.get(..8) != Some(MAGIC.as_slice()) {
        return Err(err("bad magic".into()));
    }
    let mut r = Reader { bytes, pos: 8 };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let truncated = || err(format!("truncated record {}", records.len()));
        let nl = r.u32().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(r.take(nl).ok_or_else(truncated)?.to_vec())
            .map_err(|_| err("tensor name is not UTF-8".into()))?;
        let nd = r.u32().ok_or_else(truncated)? as usize;
        if nd > 4 {
            return Err(err(format!("tensor {name} has {nd} dims")));
        }
        let dims: Vec<usize> = (0..nd)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(truncated)?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        records.push((name, dims, data));
    }
    Ok(records)
}

/// Replaces every tensor in `sets` from the file. Names and shapes must
/// match exactly; nothing is modified on error.
pub fn load<T: Real>(path: &Path, sets: &mut [&mut ParamSet<T>]) -> Result<()> {
    let bytes = fs::read(path)?;
    let records = decode(&bytes, path)?;
    let err = |msg: String| NnError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut by_name: HashMap<&str, (&[usize], &[f32])> = HashMap::new();
    for (name, dims, data) in &records {
        if by_name.insert(name, (dims, data)).is_some() {
            return Err(err(format!("duplicate tensor {name}")));
        }
    }
    let expected: usize = sets.iter().map(|s| s.len()).sum();
    if expected != records.len() {
        let known: Vec<&String> = sets.iter().flat_map(|s| &s.names).collect();
        let extra: Vec<&str> = records
            .iter()
            .map(|r| r.0.as_str())
            .filter(|n| !known.iter().any(|k| k.as_str() == *n))
            .collect();
        return Err(err(format!(
            "expected {expected} tensors, file has {} (unknown: {extra:?})",
            records.len()
        )));
    }
    let mut staged = Vec::new();
    for set in sets.iter() {
        for (name, t) in set.names.iter().zip(&set.tensors) {
            let (dims, data) = by_name.get(name.as_str()).ok_or_else(|| err(format!("missing tensor {name}")))?;
            if *dims != t.shape() {
                return Err(err(format!(
                    "shape mismatch for tensor {name}: file {dims:?}, model {:?}",
                    t.shape()
                )));
            }
            staged.push(Tensor::new(dims.to_vec(), data.iter().map(|&x| T::of(x as f64)).collect())?);
        }
    }
    let mut staged = staged.into_iter();
    for set in sets.iter_mut() {
        for t in set.tensors.iter_mut() {
            *t = staged.next().expect("staged one per tensor");
        }
    }
    Ok(())
}
