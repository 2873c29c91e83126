//! Checkpoints: model configuration plus every named parameter tensor.
//!
//! Layout (little-endian): `IMGT`, version (u32), config length (u32) and
//! UTF-8 `key = value` text, tensor count (u32), then per tensor the name
//! length (u32) and UTF-8 name, rank (u32), dims (u64 each) and `f32`
//! values.

use std::path::Path;

use super::config::{parse_model_config, render_model_config};
use crate::error::{Error, Result};
use crate::model::ImageTransformer;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IMGT";
pub const VERSION: u32 = 1;

/// Checkpoint contents before they are matched against a model.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(raw: &RawCheckpoint) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, raw.config.len())?;
    out.extend_from_slice(raw.config.as_bytes());
    put_u32(&mut out, raw.tensors.len())?;
    for (name, t) in &raw.tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = r.string()?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(RawCheckpoint { config, tensors })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn write_checkpoint(path: impl AsRef<Path>, raw: &RawCheckpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(raw)?)?;
    Ok(())
}

pub fn to_raw<T: Scalar>(model: &ImageTransformer<T>) -> RawCheckpoint {
    RawCheckpoint {
        config: render_model_config(model.config()),
        tensors: model
            .params()
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.cast()))
            .collect(),
    }
}

/// Builds the architecture described by the checkpoint's own config and
/// fills it with the stored tensors.
pub fn from_raw<T: Scalar>(raw: &RawCheckpoint) -> Result<ImageTransformer<T>> {
    let config = parse_model_config(&raw.config)?;
    let model = ImageTransformer::<T>::build(config, &mut Rng::new(0))?;
    let params = match_params(model.params(), &raw.tensors)?;
    Ok(model.with_params(params))
}

/// Replaces every tensor of `template` by the stored tensor of the same name
/// and shape, failing on the first mismatch.
pub fn match_params<T: Scalar>(template: &ParamStore<T>, tensors: &[(String, Tensor<f32>)]) -> Result<ParamStore<T>> {
    let mismatch = |name: &str, reason: String| Error::CheckpointMismatch {
        name: name.to_string(),
        reason,
    };
    let mut out = template.clone();
    for (i, e) in template.entries().iter().enumerate() {
        let Some((name, t)) = tensors.get(i) else {
            return Err(mismatch(&e.name, "missing from checkpoint".into()));
        };
        if *name != e.name {
            return Err(mismatch(&e.name, format!("checkpoint has `{name}` in its place")));
        }
        if t.shape() != e.value.shape() {
            return Err(mismatch(name, format!("shape {:?} vs model {:?}", t.shape(), e.value.shape())));
        }
        let id = out.ids().nth(i).expect("same length");
        *out.get_mut(id) = t.cast();
    }
    if let Some((name, _)) = tensors.get(template.len()) {
        return Err(mismatch(name, "not part of the model".into()));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &ImageTransformer<T>) -> Result<()> {
    write_checkpoint(path, &to_raw(model))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageTransformer<T>> {
    from_raw(&read_checkpoint(path)?)
}
