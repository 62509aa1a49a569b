//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `CAPSCKPT`, `u32` version, `u32` header
//! length and a JSON header (model config, head set, free-form metadata),
//! then `u32` blob count followed by the model parameters and any extra
//! blobs. A blob is `u32` name length, name, `u8` trainable flag, `u32` rank,
//! `u64` extents and the raw `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fingerprint, HeadSet, ModelConfig, OutfitModel};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"CAPSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub heads: HeadSet,
    pub params: ParamStore,
    /// Free-form metadata (training progress, metrics).
    pub meta: serde_json::Value,
    /// Named tensors outside the model, such as optimizer moments.
    pub extras: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    heads: HeadSet,
    param_count: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &OutfitModel) -> Self {
        Self {
            config: model.config().clone(),
            heads: model.heads(),
            params: model.params().clone(),
            meta: serde_json::Value::Null,
            extras: Vec::new(),
        }
    }

    pub fn to_model(&self) -> Result<OutfitModel> {
        let mut model = OutfitModel::new(self.config.clone(), self.heads)?;
        model.load_params(&self.params)?;
        Ok(model)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.config, self.heads, &self.params)
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            heads: self.heads,
            param_count: self.params.len(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&((self.params.len() + self.extras.len()) as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            write_blob(&mut out, &p.name, p.trainable, &p.value);
        }
        for (name, t) in &self.extras {
            write_blob(&mut out, name, false, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let header_len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        header.config.validate()?;
        let count = r.u32()? as usize;
        if count < header.param_count {
            return Err(Error::Checkpoint("blob count below parameter count".into()));
        }
        let mut params = ParamStore::new();
        let mut extras = Vec::new();
        for i in 0..count {
            let (name, trainable, value) = r.blob()?;
            if i < header.param_count {
                params.add(name, value, trainable);
            } else {
                extras.push((name, value));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config: header.config,
            heads: header.heads,
            params,
            meta: header.meta,
            extras,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_blob(out: &mut Vec<u8>, name: &str, trainable: bool, value: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(u8::from(trainable));
    out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
    for &d in value.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in value.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn blob(&mut self) -> Result<(String, bool, Tensor)> {
        let name = self.string()?;
        let trainable = match self.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad trainable flag {b} for {name}"))),
        };
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("shape overflow for {name}")))?;
        let data = self.f64s(numel)?;
        Ok((name, trainable, Tensor::new(shape, data)?))
    }
}
