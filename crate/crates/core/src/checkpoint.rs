//! Versioned binary checkpoints: parameters, optimizer state, step counter,
//! and an optional mask, with a SHA-256 integrity trailer. Serialization is
//! bit-exact, so rewinding restores the checkpointed weights exactly.
//!
//! Layout (little endian):
//!   magic "PLCK", version u32
//!   id, lineage: u16 length + utf8 each
//!   step u64
//!   optimizer: t u64, warmup u64, beta1/beta2/eps/base_lr f64
//!   param count u32
//!   manifest: name, rank u8, dims u32 x rank, prunable u8, fan_in/fan_out u32
//!   payload: per parameter, values f64
//!   moments: per parameter, first then second moment, f64 each
//!   mask flag u8; if set, per prunable parameter a packed bitfield
//!   (1 bit per element, LSB first) padded to whole bytes
//!   sha256 over everything above

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ParamEntry, ParamRegistry};
use crate::optim::{AdamParams, OptimizerState};
use crate::pruning::MaskSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PLCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub id: String,
    pub lineage: String,
    pub step: u64,
    pub params: ParamRegistry,
    pub optimizer: OptimizerState,
    pub mask: Option<MaskSet>,
}

impl Checkpoint {
    /// Construct a checkpoint, verifying that params respect the mask.
    pub fn new(
        id: impl Into<String>,
        lineage: impl Into<String>,
        step: u64,
        params: ParamRegistry,
        optimizer: OptimizerState,
        mask: Option<MaskSet>,
    ) -> Result<Self> {
        let ckpt = Checkpoint {
            id: id.into(),
            lineage: lineage.into(),
            step,
            params,
            optimizer,
            mask,
        };
        ckpt.check_mask_respected()?;
        Ok(ckpt)
    }

    pub fn check_mask_respected(&self) -> Result<()> {
        if let Some(mask) = &self.mask {
            mask.check_covers(&self.params)?;
            for entry in self.params.prunable_entries() {
                let m = mask.get(&entry.name).expect("coverage checked");
                for (i, (&v, &keep)) in entry.tensor.values().iter().zip(m).enumerate() {
                    if keep == 0.0 && v != 0.0 {
                        return Err(Error::Contract(format!(
                            "checkpoint '{}': masked entry {i} of '{}' is {v}, not 0.0",
                            self.id, entry.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_string(&mut buf, &self.id);
        put_string(&mut buf, &self.lineage);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.optimizer.t.to_le_bytes());
        buf.extend_from_slice(&self.optimizer.warmup.to_le_bytes());
        let hp = self.optimizer.params;
        for v in [hp.beta1, hp.beta2, hp.eps, hp.base_lr] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for entry in self.params.entries() {
            put_string(&mut buf, &entry.name);
            buf.push(entry.tensor.rank() as u8);
            for &d in entry.tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.push(if entry.prunable { 1 } else { 0 });
            buf.extend_from_slice(&(entry.fan_in as u32).to_le_bytes());
            buf.extend_from_slice(&(entry.fan_out as u32).to_le_bytes());
        }
        for entry in self.params.entries() {
            for &v in entry.tensor.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for idx in 0..self.params.len() {
            for &v in self.optimizer.first_moment(idx) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for &v in self.optimizer.second_moment(idx) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.mask {
            None => buf.push(0),
            Some(mask) => {
                buf.push(1);
                for entry in self.params.prunable_entries() {
                    let m = mask.get(&entry.name).expect("mask covers registry");
                    let mut packed = vec![0u8; m.len().div_ceil(8)];
                    for (i, &keep) in m.iter().enumerate() {
                        if keep == 1.0 {
                            packed[i / 8] |= 1 << (i % 8);
                        }
                    }
                    buf.extend_from_slice(&packed);
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        if buf.len() < 32 {
            return Err(Error::Format("checkpoint too short".into()));
        }
        let (body, trailer) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = ByteReader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let id = r.string()?;
        let lineage = r.string()?;
        let step = r.u64()?;
        let t = r.u64()?;
        let warmup = r.u64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let base_lr = r.f64()?;
        let count = r.u32()? as usize;
        struct ManifestRow {
            name: String,
            dims: Vec<usize>,
            prunable: bool,
            fan_in: usize,
            fan_out: usize,
        }
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let prunable = r.u8()? == 1;
            let fan_in = r.u32()? as usize;
            let fan_out = r.u32()? as usize;
            manifest.push(ManifestRow {
                name,
                dims,
                prunable,
                fan_in,
                fan_out,
            });
        }
        let mut params = ParamRegistry::new();
        for row in &manifest {
            let numel: usize = row.dims.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(r.f64()?);
            }
            params
                .push(ParamEntry {
                    name: row.name.clone(),
                    tensor: Tensor::new(row.dims.clone(), values)
                        .map_err(|e| Error::Format(e.to_string()))?,
                    prunable: row.prunable,
                    fan_in: row.fan_in,
                    fan_out: row.fan_out,
                })
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let hp = AdamParams {
            beta1,
            beta2,
            eps,
            base_lr,
        };
        let mut optimizer = OptimizerState::new(&params, hp, warmup);
        optimizer.t = t;
        for (idx, row) in manifest.iter().enumerate() {
            let numel: usize = row.dims.iter().product();
            let mut m = Vec::with_capacity(numel);
            for _ in 0..numel {
                m.push(r.f64()?);
            }
            let mut v = Vec::with_capacity(numel);
            for _ in 0..numel {
                v.push(r.f64()?);
            }
            optimizer.load_moments(idx, m, v)?;
        }
        let mask = if r.u8()? == 1 {
            let mut masks = BTreeMap::new();
            for row in manifest.iter().filter(|r| r.prunable) {
                let numel: usize = row.dims.iter().product();
                let packed = r.take(numel.div_ceil(8))?;
                let mut m = Vec::with_capacity(numel);
                for i in 0..numel {
                    let bit = (packed[i / 8] >> (i % 8)) & 1;
                    m.push(bit as f64);
                }
                masks.insert(row.name.clone(), m);
            }
            Some(MaskSet::from_map(masks).map_err(|e| Error::Format(e.to_string()))?)
        } else {
            None
        };
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        let ckpt = Checkpoint {
            id,
            lineage,
            step,
            params,
            optimizer,
            mask,
        };
        ckpt.check_mask_respected()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path)?;
        Self::from_bytes(&buf)
    }
}

fn put_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("invalid utf8 string".into()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}
