//! Binary container for teachers, adapters and raw tensor dumps.
//!
//! Layout (little endian): magic `SUNCKPT1`, `u32` version, `u8` kind,
//! `u64` architecture hash, `u32` metadata count with length-prefixed
//! key/value strings, `u32` tensor count with name, rank, dims and `f32`
//! data, then a SHA-256 digest of everything before it.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adapter::SunAdapter;
use crate::denoiser::{TeacherModel, UNetConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SUNCKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Teacher,
    Adapter,
    Tensors,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Teacher => 0,
            Kind::Adapter => 1,
            Kind::Tensors => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Kind::Teacher),
            1 => Ok(Kind::Adapter),
            2 => Ok(Kind::Tensors),
            _ => Err(Error::Format(format!("unknown checkpoint kind {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    /// Teacher: its own hash. Adapter: the host it was built for.
    pub arch: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.arch.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = Kind::from_code(r.take(1)?[0])?;
        let arch = r.u64()?;
        let meta = (0..r.u32()?)
            .map(|_| Ok((r.string()?, r.string()?)))
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self {
            kind,
            arch,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            s.add(name.clone(), t.clone(), false);
        }
        s
    }

    fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)))
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8 in checkpoint".into()))
    }
}

fn tensors_of(store: &ParamStore) -> Vec<(String, Tensor<f32>)> {
    store.entries().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

pub fn teacher_checkpoint(model: &TeacherModel) -> Checkpoint {
    let c = &model.config;
    let meta = [
        ("widths", format!("{},{},{}", c.widths[0], c.widths[1], c.widths[2])),
        ("groups", c.groups.to_string()),
        ("time_features", c.time_features.to_string()),
        ("time_dim", c.time_dim.to_string()),
        ("attn_dim", c.attn_dim.to_string()),
        ("heads", c.heads.to_string()),
    ];
    Checkpoint {
        kind: Kind::Teacher,
        arch: model.architecture_hash(),
        meta: meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        tensors: tensors_of(&model.store),
    }
}

/// Rebuilds a frozen teacher.
pub fn teacher_from_checkpoint(ck: &Checkpoint) -> Result<TeacherModel> {
    ck.expect_kind(Kind::Teacher)?;
    let num = |key: &str| -> Result<usize> {
        ck.require(key)?
            .parse()
            .map_err(|_| Error::Format(format!("bad `{key}` in checkpoint")))
    };
    let widths: Vec<usize> = ck
        .require("widths")?
        .split(',')
        .map(|w| w.parse().map_err(|_| Error::Format("bad `widths` in checkpoint".into())))
        .collect::<Result<_>>()?;
    let widths: [usize; 3] = widths
        .try_into()
        .map_err(|_| Error::Format("`widths` needs three entries".into()))?;
    let config = UNetConfig {
        widths,
        groups: num("groups")?,
        time_features: num("time_features")?,
        time_dim: num("time_dim")?,
        attn_dim: num("attn_dim")?,
        heads: num("heads")?,
    };
    let mut model = TeacherModel::new(config, 0);
    if model.architecture_hash() != ck.arch || model.store.len() != ck.tensors.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint architecture {:016x} does not match its configuration ({:016x})",
            ck.arch,
            model.architecture_hash()
        )));
    }
    model.store.load_from(&ck.store())?;
    model.freeze();
    Ok(model)
}

pub fn adapter_checkpoint(adapter: &SunAdapter) -> Checkpoint {
    Checkpoint {
        kind: Kind::Adapter,
        arch: adapter.host_architecture(),
        meta: vec![("normalize".into(), adapter.normalize.to_string())],
        tensors: tensors_of(&adapter.store),
    }
}

pub fn adapter_from_checkpoint(ck: &Checkpoint) -> Result<SunAdapter> {
    ck.expect_kind(Kind::Adapter)?;
    let normalize = match ck.require("normalize")? {
        "true" => true,
        "false" => false,
        other => return Err(Error::Format(format!("bad `normalize` value `{other}`"))),
    };
    SunAdapter::from_parts(ck.store(), normalize, ck.arch)
}

pub fn tensors_checkpoint(meta: Vec<(String, String)>, tensors: Vec<(String, Tensor<f32>)>) -> Checkpoint {
    Checkpoint {
        kind: Kind::Tensors,
        arch: 0,
        meta,
        tensors,
    }
}
