// Binary checkpoint container.
//
// Layout, all integers little-endian:
//   magic  b"BTFCKPT\0"
//   u32    format version
//   u32    spec length, then the spec as UTF-8 JSON
//   u32    parameter count
//   per parameter:
//     u32 name length, name bytes
//     u32 rank, u64 per dimension
//     f64 values
//
// Decoding never trusts a length field: every read is checked against the
// remaining input, and the model is only built once the spec validates and
// its parameter count fits inside the bytes that are actually present.

use std::path::Path;

use super::{Model, ModelError, ModelSpec, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BTFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let spec = serde_json::to_vec(model.spec()).expect("spec serializes");
    let mut out = Vec::with_capacity(64 + spec.len() + model.count_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(err(format!("truncated while reading {what}")));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(err("not a checkpoint file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let spec_len = r.u32("spec length")? as usize;
    let spec_bytes = r.take(spec_len, "spec")?;
    let spec: ModelSpec =
        serde_json::from_slice(spec_bytes).map_err(|e| err(format!("spec: {e}")))?;
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(ModelError::InvalidSpec(problems));
    }
    let expected = spec
        .parameter_count()
        .ok_or_else(|| err("parameter count overflows"))?;
    if expected.saturating_mul(8) > r.remaining() {
        return Err(err(format!(
            "spec needs {expected} parameters but only {} bytes remain",
            r.remaining()
        )));
    }

    let mut model = Model::build(&spec, 0)?;
    let n = r.u32("parameter count")? as usize;
    if n != model.params().len() {
        return Err(err(format!(
            "expected {} parameter tensors, found {n}",
            model.params().len()
        )));
    }
    let mut seen = vec![false; n];
    for i in 0..n {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| err(format!("parameter {i}: name is not UTF-8")))?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(err(format!("{name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let id = model
            .params()
            .id(name)
            .ok_or_else(|| err(format!("unknown parameter {name:?}")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(err(format!("duplicate parameter {name:?}")));
        }
        let target = model.params().get(id);
        if target.shape() != shape.as_slice() {
            return Err(err(format!(
                "{name}: stored shape {shape:?}, model expects {:?}",
                target.shape()
            )));
        }
        let raw = r.take(target.numel() * 8, name)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data)?.with_requires_grad(true);
        *model.params_mut().get_mut(id) = t;
    }
    if r.remaining() != 0 {
        return Err(err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
