//! Binary checkpoint container.
//!
//! Layout (all integers u32 little-endian):
//! magic `OWCK`, version, stage tag, config length + UTF-8 TOML run config,
//! state length + UTF-8 JSON training state, record count, then per record:
//! name length + UTF-8 name, rank, extents, row-major f32 LE values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// 0 = freshly initialized, 1..=3 = completed training stage.
    pub stage: u32,
    pub config: String,
    pub state: String,
    pub records: Vec<(String, Tensor<f32>)>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    put_u32(w, b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_string(r: &mut impl Read, what: &str) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated checkpoint ({e})"))
}

impl Checkpoint {
    pub fn record<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut c = t.cast::<f32>();
        c.requires_grad = false;
        c.grad = None;
        self.records.push((name.into(), c));
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_u32(w, self.stage)?;
        put_bytes(w, self.config.as_bytes())?;
        put_bytes(w, self.state.as_bytes())?;
        put_u32(w, self.records.len() as u32)?;
        for (name, t) in &self.records {
            put_bytes(w, name.as_bytes())?;
            put_u32(w, t.shape().len() as u32)?;
            for &e in t.shape() {
                put_u32(w, e as u32)?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let stage = get_u32(r)?;
        if stage > 3 {
            return Err(Error::Checkpoint(format!("unknown stage tag {stage}")));
        }
        let config = get_string(r, "config")?;
        let state = get_string(r, "state")?;
        let n = get_u32(r)? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = get_string(r, "record name")?;
            let rank = get_u32(r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("record `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| get_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf).map_err(truncated)?;
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
            records.push((name, t));
        }
        Ok(Checkpoint { stage, config, state, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }
}
