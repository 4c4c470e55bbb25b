//! Binary parameter file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MUCHGCN1"
//! u32 entry count
//! per entry: u32 name length, UTF-8 name, u32 rank, rank × u64 dims,
//!            product(dims) × f64
//! ```
//!
//! Names follow the parameter visitors (`layer0/convW1`,
//! `layer1/graph3/embed_theta`, `classifier/0/weight`, ...). Running
//! statistics of normalization sites are stored as `<site>/running_mean`
//! and `<site>/running_var`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MUCHGCN1";

/// All stored arrays in visitor order.
pub fn entries(params: &ModelParams<Tensor>) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    params.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
    params.visit_norms(&mut |prefix, bn| {
        out.push((format!("{prefix}/running_mean"), Tensor::vector(bn.running_mean.clone())));
        out.push((format!("{prefix}/running_var"), Tensor::vector(bn.running_var.clone())));
    });
    out
}

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing MUCHGCN1 header".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(params: &ModelParams<Tensor>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&entries(params)))?;
    Ok(())
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Overwrites every array of `params` from `entries`. Names and shapes must
/// match exactly, with nothing left over.
pub fn restore(params: &mut ModelParams<Tensor>, entries: Vec<(String, Tensor)>) -> Result<()> {
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in entries {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
    }
    let mut problem: Option<String> = None;
    let mut fill = |name: &str, dst: &mut [f64], shape: &[usize], by_name: &mut BTreeMap<String, Tensor>| {
        match by_name.remove(name) {
            Some(t) if t.shape() == shape => dst.copy_from_slice(t.data()),
            Some(t) => {
                problem.get_or_insert(format!("{name}: stored shape {:?}, expected {shape:?}", t.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing entry {name}"));
            }
        }
    };
    params.visit_mut(&mut |name, t| {
        let shape = t.shape().to_vec();
        fill(name, t.data_mut(), &shape, &mut by_name);
    });
    params.visit_norms_mut(&mut |prefix, bn| {
        let w = [bn.running_mean.len()];
        fill(&format!("{prefix}/running_mean"), &mut bn.running_mean, &w, &mut by_name);
        fill(&format!("{prefix}/running_var"), &mut bn.running_var, &w, &mut by_name);
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected entry {extra}")));
    }
    Ok(())
}
