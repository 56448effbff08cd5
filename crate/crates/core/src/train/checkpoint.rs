//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "AAGCNCKP"
//! version      u32
//! header_len   u64, then header_len bytes of JSON:
//!              {format_version, tool_version, dtype, epoch, model, constants, run}
//! entry_count  u64, then per entry:
//!              name_len u32, name (UTF-8), kind u8, frozen u8,
//!              rank u32, dims rank×u64, values numel×f64
//! has_optim    u8; when 1: momentum f64, weight_decay f64, nesterov u8,
//!              then one velocity per entry: name_len u32, name,
//!              rank u32, dims rank×u64, values numel×f64
//! checksum     32 bytes, SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerConfig, OptimizerState, TrainState};
use crate::error::{Error, Result};
use crate::network::{DesignConstants, Model, ModelConfig};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AAGCNCKP";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub constants: DesignConstants,
    /// Resolved run configuration, stored verbatim.
    pub run: serde_json::Value,
    /// Completed epochs.
    pub epoch: usize,
    pub store: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_state(model: &Model, state: &TrainState, run: serde_json::Value) -> Self {
        Self {
            model: model.config.clone(),
            constants: DesignConstants::default(),
            run,
            epoch: state.epoch,
            store: state.store.clone(),
            optimizer: Some(state.optimizer.clone()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    tool_version: String,
    dtype: String,
    epoch: usize,
    model: ModelConfig,
    constants: DesignConstants,
    run: serde_json::Value,
}

fn ck_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend(x.to_le_bytes());
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
}

pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        dtype: ck.constants.dtype.clone(),
        epoch: ck.epoch,
        model: ck.model.clone(),
        constants: ck.constants.clone(),
        run: ck.run.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    out.extend((ck.store.len() as u64).to_le_bytes());
    for e in ck.store.entries() {
        put_name(&mut out, &e.name);
        out.push(e.kind.tag());
        out.push(u8::from(e.frozen));
        put_tensor(&mut out, &e.value);
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend(opt.config.momentum.to_le_bytes());
            out.extend(opt.config.weight_decay.to_le_bytes());
            out.push(u8::from(opt.config.nesterov));
            if opt.velocity.len() != ck.store.len() {
                return ck_err("optimizer state does not match the parameter store");
            }
            for (e, v) in ck.store.entries().iter().zip(&opt.velocity) {
                put_name(&mut out, &e.name);
                put_tensor(&mut out, v);
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend(digest.iter());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return ck_err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).or_else(|_| ck_err("parameter name is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return ck_err(format!("implausible tensor rank {rank}"));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return ck_err(format!("truncated tensor of shape {shape:?}"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data)
    }
}

/// Parses and validates a checkpoint: checksum, version, design constants,
/// and that every stored entry matches the architecture its config builds.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return ck_err("not a checkpoint file (bad magic or too short)");
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return ck_err("content checksum mismatch (file corrupted or truncated)");
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return ck_err(format!("format version {version} is not supported (expected {FORMAT_VERSION})"));
    }
    let hlen = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    if header.format_version != version {
        return ck_err("header and container versions disagree");
    }
    if header.constants != DesignConstants::default() {
        return ck_err(format!("checkpoint was built with different constants: {:?}", header.constants));
    }
    let (_, mut store) = Model::new(header.model.clone(), 0)?;
    let count = r.u64()? as usize;
    if count != store.len() {
        return ck_err(format!("checkpoint holds {count} entries, the model defines {}", store.len()));
    }
    for _ in 0..count {
        let name = r.name()?;
        let Some(id) = store.id(&name) else {
            return ck_err(format!("unknown parameter name {name:?}"));
        };
        let kind = ParamKind::from_tag(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("{name}: bad kind tag")))?;
        let frozen = r.u8()? != 0;
        let value = r.tensor()?;
        if kind != store.entry(id).kind || value.shape() != store.value(id).shape() {
            return ck_err(format!("{name}: stored {kind:?} {:?} does not match the model", value.shape()));
        }
        store.set_value(id, value)?;
        store.set_frozen(id, frozen);
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let momentum = r.f64()?;
            let weight_decay = r.f64()?;
            let nesterov = r.u8()? != 0;
            let mut velocity = Vec::with_capacity(store.len());
            for e in store.entries() {
                let name = r.name()?;
                let v = r.tensor()?;
                if name != e.name || v.shape() != e.value.shape() {
                    return ck_err(format!("velocity {name:?} does not match parameter {:?}", e.name));
                }
                velocity.push(v);
            }
            Some(OptimizerState { config: OptimizerConfig { momentum, nesterov, weight_decay }, velocity })
        }
        t => return ck_err(format!("bad optimizer flag {t}")),
    };
    if r.pos != body.len() {
        return ck_err(format!("{} trailing bytes", body.len() - r.pos));
    }
    Ok(Checkpoint {
        model: header.model,
        constants: header.constants,
        run: header.run,
        epoch: header.epoch,
        store,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, write_checkpoint(ck)?).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Loads a checkpoint and rebuilds its model. With `expected`, a model
/// configuration that differs is rejected.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, Checkpoint)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let ck = read_checkpoint(&bytes)?;
    if let Some(cfg) = expected {
        if cfg != &ck.model {
            return ck_err("checkpoint model configuration differs from the requested one");
        }
    }
    let (model, _) = Model::new(ck.model.clone(), 0)?;
    Ok((model, ck))
}
