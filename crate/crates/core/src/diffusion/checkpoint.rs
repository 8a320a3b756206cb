//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "FTMSSMCK"
//! version      u32      FORMAT_VERSION
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! root_seed    u64
//! step         u64
//! params       tensor block
//! has_adam     u8       0 or 1; when 1:
//!   adam_t     u64
//!   m          tensor block
//!   v          tensor block
//! trace_len    u64
//! trace        trace_len × f64
//! checksum     u64      FNV-1a 64 of every preceding byte
//! ```
//!
//! A tensor block is a `u32` count followed by, per tensor in name order:
//! `u32` name length, UTF-8 name, `u8` frozen flag, `u32` rank, `rank × u64`
//! dims, then `numel × f64` row-major data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserLayout};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::tensor_grad::{ParameterSet, Tensor};
use crate::train::{AdamW, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"FTMSSMCK";
pub const FORMAT_VERSION: u32 = 1;

/// Configuration echo stored ahead of the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Free-form provenance such as the training corpus hash.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: TrainState,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, ps: &ParameterSet) {
    put_u32(out, ps.len() as u32);
    for (name, t) in ps.iter() {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(ps.is_frozen(name) as u8);
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<ParameterSet> {
        let count = self.u32("tensor count")?;
        let mut ps = ParameterSet::new();
        for _ in 0..count {
            let len = self.u32("name length")? as usize;
            let name = std::str::from_utf8(self.take(len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let frozen = self.u8("frozen flag")? != 0;
            let rank = self.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64("dim")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|&n| n <= (self.buf.len() - self.pos) / 8);
            let numel = numel.ok_or_else(|| Error::Format(format!("tensor `{name}` larger than the file")))?;
            let data = (0..numel).map(|_| self.f64("tensor data")).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            ps.insert(name.clone(), t).map_err(|e| Error::Format(e.to_string()))?;
            if frozen {
                ps.freeze(&name)?;
            }
        }
        Ok(ps)
    }
}

fn check_layout(expected: &ParameterSet, got: &ParameterSet, what: &str) -> Result<()> {
    for (name, t) in expected.iter() {
        match got.get(name) {
            Some(g) if g.shape() == t.shape() => {}
            Some(g) => {
                return Err(Error::Format(format!(
                    "{what} `{name}` has shape {:?}, model expects {:?}",
                    g.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Format(format!("{what} `{name}` missing"))),
        }
    }
    if let Some(extra) = got.names().find(|n| !expected.contains(n)) {
        return Err(Error::Format(format!("unexpected {what} `{extra}`")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put_u64(&mut out, self.state.root_seed);
        put_u64(&mut out, self.state.step);
        put_tensors(&mut out, &self.state.model.params);
        out.push(1);
        put_u64(&mut out, self.state.optimizer.t);
        put_tensors(&mut out, &self.state.optimizer.m);
        put_tensors(&mut out, &self.state.optimizer.v);
        put_u64(&mut out, self.state.loss_trace.len() as u64);
        for &l in &self.state.loss_trace {
            out.extend_from_slice(&l.to_le_bytes());
        }
        let sum = fnv1a64(&out);
        put_u64(&mut out, sum);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let body_len = buf.len().checked_sub(8).ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let stored = u64::from_le_bytes(buf[body_len..].try_into().unwrap());
        if stored != fnv1a64(&buf[..body_len]) {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let r = &mut Reader { buf: &buf[..body_len], pos: r.pos };
        let header_len = r.u32("header length")? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let root_seed = r.u64("root seed")?;
        let step = r.u64("step")?;
        let params = r.tensors()?;
        let layout = DenoiserLayout::new(header.model.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let expected = layout.init(0)?;
        check_layout(&expected, &params, "parameter")?;
        let optimizer = match r.u8("optimizer flag")? {
            0 => AdamW::new(&params),
            1 => {
                let t = r.u64("adam step")?;
                let m = r.tensors()?;
                let v = r.tensors()?;
                check_layout(&expected, &m, "first moment")?;
                check_layout(&expected, &v, "second moment")?;
                AdamW { m, v, t }
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        let n = r.u64("trace length")? as usize;
        if n > (r.buf.len() - r.pos) / 8 {
            return Err(Error::Format("loss trace longer than the file".into()));
        }
        let loss_trace = (0..n).map(|_| r.f64("loss trace")).collect::<Result<Vec<_>>>()?;
        if r.pos != r.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", r.buf.len() - r.pos)));
        }
        let model = Denoiser { layout, params };
        Ok(Self { header, state: TrainState { model, optimizer, root_seed, step, loss_trace } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
