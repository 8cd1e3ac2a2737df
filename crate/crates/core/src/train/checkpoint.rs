//! Checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "MSKC"                 magic
//! u32                    version (= 1)
//! u64                    fingerprint of the parameter keys and shapes
//! u64                    training step
//! u8                     stage tag (0 acoustic, 1 linguistic, 2 posttrain)
//! u64                    optimizer step (0 when no optimizer state is stored)
//! u32                    entry count
//! entries, each:
//!   u32 name length, UTF-8 name
//!   u32 rows, u32 cols
//!   u8  dtype (1 = f32, 2 = f64)
//!   rows·cols values, row-major
//! ```
//!
//! Entry names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nnet::ModelParams;
use crate::train::config::Stage;
use crate::train::optim::AdamState;

pub const CKPT_MAGIC: &[u8; 4] = b"MSKC";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub fingerprint: u64,
    pub stage: Stage,
}

impl Checkpoint {
    pub fn new(params: ModelParams, optimizer: Option<AdamState>, step: u64, stage: Stage) -> Self {
        let fingerprint = params.fingerprint();
        Self { params, optimizer, step, fingerprint, stage }
    }

    pub fn encode(&self, dtype: DType) -> Vec<u8> {
        let mut entries: Vec<(String, &Array2<f64>)> =
            self.params.iter().map(|(k, v)| (format!("param/{k}"), v)).collect();
        if let Some(opt) = &self.optimizer {
            entries.extend(opt.m.iter().map(|(k, v)| (format!("adam.m/{k}"), v)));
            entries.extend(opt.v.iter().map(|(k, v)| (format!("adam.v/{k}"), v)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.write_u32::<LittleEndian>(CKPT_VERSION).unwrap();
        out.write_u64::<LittleEndian>(self.fingerprint).unwrap();
        out.write_u64::<LittleEndian>(self.step).unwrap();
        out.write_u8(self.stage.tag()).unwrap();
        out.write_u64::<LittleEndian>(self.optimizer.as_ref().map_or(0, |o| o.step)).unwrap();
        out.write_u32::<LittleEndian>(entries.len() as u32).unwrap();
        for (name, t) in entries {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(t.nrows() as u32).unwrap();
            out.write_u32::<LittleEndian>(t.ncols() as u32).unwrap();
            match dtype {
                DType::F32 => {
                    out.write_u8(1).unwrap();
                    for &v in t.iter() {
                        out.write_f32::<LittleEndian>(v as f32).unwrap();
                    }
                }
                DType::F64 => {
                    out.write_u8(2).unwrap();
                    for &v in t.iter() {
                        out.write_f64::<LittleEndian>(v).unwrap();
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let fail = |msg: String| Error::Format { path: origin.to_string(), msg };
        let trunc = |_| fail("truncated checkpoint".into());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(trunc)?;
        if &magic != CKPT_MAGIC {
            return Err(fail("bad magic, expected MSKC".into()));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != CKPT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint = cur.read_u64::<LittleEndian>().map_err(trunc)?;
        let step = cur.read_u64::<LittleEndian>().map_err(trunc)?;
        let tag = cur.read_u8().map_err(trunc)?;
        let stage = Stage::from_tag(tag).ok_or_else(|| fail(format!("unknown stage tag {tag}")))?;
        let opt_step = cur.read_u64::<LittleEndian>().map_err(trunc)?;
        let n = cur.read_u32::<LittleEndian>().map_err(trunc)?;

        let mut params = ModelParams::new();
        let mut opt = AdamState { step: opt_step, ..AdamState::default() };
        for _ in 0..n {
            let len = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|_| fail("entry name is not UTF-8".into()))?;
            let rows = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let cols = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            let dtype = cur.read_u8().map_err(trunc)?;
            let mut data = vec![0f64; rows * cols];
            match dtype {
                1 => {
                    for v in data.iter_mut() {
                        *v = cur.read_f32::<LittleEndian>().map_err(trunc)? as f64;
                    }
                }
                2 => cur.read_f64_into::<LittleEndian>(&mut data).map_err(trunc)?,
                other => return Err(fail(format!("unknown dtype {other}"))),
            }
            let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| fail(e.to_string()))?;
            if let Some(k) = name.strip_prefix("param/") {
                params.insert(k, t);
            } else if let Some(k) = name.strip_prefix("adam.m/") {
                opt.m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("adam.v/") {
                opt.v.insert(k.to_string(), t);
            } else {
                return Err(fail(format!("unknown entry {name}")));
            }
        }
        if cur.position() as usize != bytes.len() {
            return Err(fail("trailing bytes after last entry".into()));
        }
        if params.fingerprint() != fingerprint {
            return Err(fail(format!(
                "stored fingerprint {fingerprint:016x} does not match tensors ({:016x})",
                params.fingerprint()
            )));
        }
        let optimizer = (!opt.m.is_empty() || opt_step > 0).then_some(opt);
        Ok(Self { params, optimizer, step, fingerprint, stage })
    }

    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        fs::write(path, self.encode(dtype))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?, &path.display().to_string())
    }
}

/// Elementwise arithmetic mean of the parameters (optimizer state ignored).
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<ModelParams> {
    let refs: Vec<&ModelParams> = ckpts.iter().map(|c| &c.params).collect();
    if let Some(first) = ckpts.first() {
        if let Some(bad) = ckpts.iter().find(|c| c.fingerprint != first.fingerprint) {
            return Err(Error::Fingerprint(first.fingerprint, bad.fingerprint));
        }
    }
    average_params(&refs)
}

pub fn average_params(sets: &[&ModelParams]) -> Result<ModelParams> {
    let first = sets.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    let fp = first.fingerprint();
    if let Some(bad) = sets.iter().find(|p| p.fingerprint() != fp) {
        return Err(Error::Fingerprint(fp, bad.fingerprint()));
    }
    let n = sets.len() as f64;
    Ok(first
        .iter()
        .map(|(k, v)| {
            let mut sum = v.clone();
            for p in &sets[1..] {
                sum += p.get(k).unwrap();
            }
            (k.to_string(), sum / n)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn params(v: f64) -> ModelParams {
        [("a".to_string(), array![[v, 2.0 * v]]), ("b".to_string(), array![[v]])]
            .into_iter()
            .collect()
    }

    #[test]
    fn average_of_two() {
        let c = [Checkpoint::new(params(0.0), None, 1, Stage::Posttrain), Checkpoint::new(params(2.0), None, 2, Stage::Posttrain)];
        assert_eq!(average_checkpoints(&c).unwrap(), params(1.0));
        assert_eq!(average_checkpoints(&c[..1]).unwrap(), params(0.0));
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let mut other = params(1.0);
        other.insert("c", array![[0.0]]);
        let c = [Checkpoint::new(params(0.0), None, 1, Stage::Posttrain), Checkpoint::new(other, None, 2, Stage::Posttrain)];
        assert!(matches!(average_checkpoints(&c), Err(Error::Fingerprint(..))));
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn binary_round_trip_with_optimizer() {
        let mut opt = AdamState { step: 7, ..Default::default() };
        opt.m.insert("a".into(), array![[0.5, -0.25]]);
        opt.v.insert("a".into(), array![[1e-3, 2e-3]]);
        let ck = Checkpoint::new(params(0.1), Some(opt), 70, Stage::Linguistic);
        let back = Checkpoint::decode(&ck.encode(DType::F64), "mem").unwrap();
        assert_eq!(back, ck);
        let lossy = Checkpoint::decode(&ck.encode(DType::F32), "mem").unwrap();
        assert_eq!(lossy.params.get("a").unwrap()[[0, 0]], 0.1f32 as f64);
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::new(params(1.0), None, 3, Stage::Acoustic);
        let bytes = ck.encode(DType::F64);
        assert_eq!(&bytes[..4], b"MSKC");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..16], ck.fingerprint.to_le_bytes());
        assert_eq!(bytes[16..24], 3u64.to_le_bytes());
        assert_eq!(bytes[24], 0);
        assert_eq!(bytes[25..33], 0u64.to_le_bytes());
        assert_eq!(bytes[33..37], 2u32.to_le_bytes());
        let mut corrupt = bytes.clone();
        corrupt[9] ^= 1;
        assert!(Checkpoint::decode(&corrupt, "mem").is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], "mem").is_err());
    }
}
