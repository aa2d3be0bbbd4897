//! Versioned binary model checkpoints.
//!
//! ```text
//! "DKDL"  u32 version
//! u32 len, model name (UTF-8)
//! u32 len, metadata (UTF-8 `key=value` lines, sorted by key)
//! u32 tensor count
//! per tensor: u32 len, name; u32 ndim; ndim × u32 dims; f32 values
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`, so
//! a model survives a save/load cycle bit-exactly once it has been rounded
//! to `f32` (which loading does).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{build_dkdl_net_spec, build_student_with, build_teacher_with, LayerKind, LoraSettings, Model, ModelKind, PoolKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DKDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_name: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<StoredTensor>,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated { offset: self.bytes.len() });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        core::str::from_utf8(b)
            .map(ToString::to_string)
            .map_err(|_| Error::Malformed(format!("invalid UTF-8 at byte {at}")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    /// Snapshot of `model`'s tensors. Architecture settings are added to
    /// `metadata` so [`Checkpoint::to_model`] can rebuild the spec.
    pub fn from_model(model: &Model, mut metadata: BTreeMap<String, String>) -> Self {
        let spec = model.spec();
        let avg = spec.layers.iter().any(|l| matches!(l.kind, LayerKind::AvgPool1d { .. }));
        metadata.insert("pooling".into(), if avg { "avg" } else { "max" }.into());
        if let Some(l) = spec.lora {
            metadata.insert("lora.rank".into(), l.rank.to_string());
            metadata.insert("lora.sigma".into(), format!("{:?}", l.sigma));
            if let Some(a) = l.alpha {
                metadata.insert("lora.alpha".into(), format!("{a:?}"));
            }
            metadata.insert("merged".into(), model.is_merged().to_string());
        }
        let tensors = model
            .params()
            .iter()
            .map(|p| StoredTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            model_name: spec.kind.name().into(),
            metadata,
            tensors,
        }
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.model_name != kind.name() {
            return Err(Error::ModelMismatch {
                expected: kind.name().into(),
                found: self.model_name.clone(),
            });
        }
        Ok(())
    }

    fn meta_parse<T: core::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.metadata
            .get(key)
            .map(|v| v.parse().map_err(|_| Error::Malformed(format!("bad metadata value {key}={v}"))))
            .transpose()
    }

    pub fn to_model(&self) -> Result<Model> {
        let kind = ModelKind::from_name(&self.model_name)
            .ok_or_else(|| Error::Malformed(format!("unknown model name `{}`", self.model_name)))?;
        let pooling = match self.metadata.get("pooling").map(String::as_str) {
            Some("avg") => PoolKind::Avg,
            _ => PoolKind::Max,
        };
        let mut spec = match kind {
            ModelKind::Teacher => build_teacher_with(pooling),
            ModelKind::Student => build_student_with(pooling),
            ModelKind::DkdlNet => {
                let defaults = LoraSettings::default();
                let settings = LoraSettings {
                    rank: self.meta_parse("lora.rank")?.unwrap_or(defaults.rank),
                    sigma: self.meta_parse("lora.sigma")?.unwrap_or(defaults.sigma),
                    alpha: self.meta_parse("lora.alpha")?,
                };
                build_dkdl_net_spec(&build_student_with(pooling), settings)?
            }
        };
        if self.meta_parse::<bool>("merged")?.unwrap_or(false) {
            for l in &mut spec.layers {
                if matches!(l.kind, LayerKind::LoraConv1d { .. } | LayerKind::LoraLinear { .. }) {
                    l.merged = true;
                }
            }
        }
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let data = t.data.iter().map(|&v| v as f64).collect();
                Ok((t.name.clone(), Tensor::new(&t.shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_params(spec, tensors)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.model_name);
        let meta: String = self
            .metadata
            .iter()
            .map(|(k, v)| format!("{}={}\n", escape(k), escape(v)))
            .collect();
        put_str(&mut out, &meta);
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotACheckpoint);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let model_name = r.string()?;
        let meta = r.string()?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("metadata line without '=': {line}")))?;
            metadata.insert(unescape(k), unescape(v));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes_needed = n.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Malformed(format!("tensor `{name}` too large")))?;
            let raw = r.take(bytes_needed)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model_name, metadata, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_student, build_teacher};

    fn meta() -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("seed".into(), "7".into());
        m.insert("config".into(), "{\"a\":\"x\\ny\"}\nsecond line".into());
        m
    }

    #[test]
    fn encode_decode_encode_is_stable() {
        let model = Model::init(build_teacher(), 1).unwrap();
        let ck = Checkpoint::from_model(&model, meta());
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        let reloaded = back.to_model().unwrap();
        assert_eq!(Checkpoint::from_model(&reloaded, meta()).encode(), bytes);
    }

    #[test]
    fn error_kinds() {
        let bytes = Checkpoint::from_model(&Model::init(build_student(), 0).unwrap(), meta()).encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::decode(&bad), Err(Error::NotACheckpoint));
        assert_eq!(Checkpoint::decode(&[]), Err(Error::NotACheckpoint));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert_eq!(Checkpoint::decode(&v2), Err(Error::UnsupportedVersion(2)));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn model_name_mismatch() {
        let ck = Checkpoint::from_model(&Model::init(build_teacher(), 0).unwrap(), BTreeMap::new());
        assert!(matches!(ck.expect_kind(ModelKind::Student), Err(Error::ModelMismatch { .. })));
    }
}
