//! Little-endian checkpoint: magic `BIVM`, version, config digest, config
//! text, then length-prefixed named parameter blobs.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Group, Param, ParamKind, ParamStore};
use crate::tensor::Shape;

pub const MAGIC: &[u8; 4] = b"BIVM";
pub const VERSION: u32 = 1;

/// Marks a derived weight-scale blob, checked on load and not stored.
const SCALE_TAG: u8 = 0xFF;

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64
}

pub fn to_bytes(m: &Model) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    put_u32(&mut w, VERSION);
    w.extend_from_slice(&m.cfg.digest());
    put_str(&mut w, &m.cfg.to_toml());
    let scales: Vec<(String, f64)> = m
        .store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::BinaryWeight)
        .map(|(n, p)| (format!("{n}.scale"), mean_abs(&p.data)))
        .collect();
    put_u32(&mut w, (m.store.len() + scales.len()) as u32);
    for (name, p) in m.store.iter() {
        put_str(&mut w, name);
        w.push(p.kind.code());
        w.push(p.group.code());
        for d in [p.shape.n, p.shape.c, p.shape.h, p.shape.w] {
            put_u32(&mut w, d as u32);
        }
        for v in &p.data {
            w.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (name, s) in scales {
        put_str(&mut w, &name);
        w.push(SCALE_TAG);
        w.push(0);
        for d in [1u32, 1, 1, 1] {
            put_u32(&mut w, d);
        }
        w.extend_from_slice(&s.to_le_bytes());
    }
    w
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("non-utf8 string"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { b: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(bad(format!("unsupported version {v}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let cfg = ModelConfig::from_toml(&r.string()?)?;
    if cfg.digest() != digest {
        return Err(bad("config digest mismatch"));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    let mut scales = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let kind = r.u8()?;
        let group = r.u8()?;
        let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let len = shape.len();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("blob too large"))?)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if kind == SCALE_TAG {
            scales.push((name, data[0]));
            continue;
        }
        let kind = ParamKind::from_code(kind).ok_or_else(|| bad(format!("unknown kind for `{name}`")))?;
        let group = Group::from_code(group).ok_or_else(|| bad(format!("unknown group for `{name}`")))?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite values in `{name}`")));
        }
        store.insert(name, Param { shape, data, kind, group })?;
    }
    if r.at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    for (name, s) in scales {
        let w = name.strip_suffix(".scale").ok_or_else(|| bad(format!("bad scale blob `{name}`")))?;
        if mean_abs(&store.get(w)?.data) != s {
            return Err(bad(format!("weight scale of `{w}` does not match its weights")));
        }
    }
    let fresh = Model::new(cfg.clone(), 0)?;
    for (name, p) in fresh.store.iter() {
        let got = store.get(name).map_err(|_| bad(format!("missing parameter `{name}`")))?;
        if got.shape != p.shape || got.kind != p.kind {
            return Err(bad(format!("parameter `{name}` has the wrong shape or kind")));
        }
    }
    if store.len() != fresh.store.len() {
        return Err(bad("checkpoint has parameters the config does not declare"));
    }
    Ok(Model { cfg, store })
}

pub fn save(m: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(m))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let mut b = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut b)?;
    from_bytes(&b)
}
