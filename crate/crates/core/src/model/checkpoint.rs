//! Versioned binary checkpoints.
//!
//! Layout: magic `ERCK`, format version (u32 LE), a length-prefixed JSON
//! meta block ({kind, config, step}), then named tensors: name length +
//! UTF-8 name, rank (u8), dims (u64 LE each), and the little-endian f64
//! payload. Loading verifies magic, version, and — when the caller states
//! expectations — kind and config, failing loudly on mismatch.

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{ModelKind, ParamStore};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ERCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: ModelKind,
    config: ModelConfig,
    step: u64,
}

pub struct LoadedCheckpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamStore,
    /// Tensors outside the parameter set (optimizer moments etc.),
    /// recognized by their `extra.` name prefix.
    pub extra: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: ModelKind,
    config: &ModelConfig,
    step: u64,
    params: &ParamStore,
    extra: &[(String, Tensor)],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(&Meta { kind, config: config.clone(), step })?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;

    let count = params.len() + extra.len();
    w.write_all(&(count as u64).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        write_tensor(&mut w, name, tensor)?;
    }
    for (name, tensor) in extra {
        write_tensor(&mut w, &format!("extra.{name}"), tensor)?;
    }
    w.flush()?;
    Ok(())
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&[t.shape.len() as u8])?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint(format!("bad magic {magic:?}, not a checkpoint file")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint format version {version}, this build reads {VERSION}"
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| CoreError::Checkpoint(format!("unreadable meta block: {e}")))?;

    let count = read_u64(&mut r)? as usize;
    let mut params = ParamStore::new();
    let mut extra = Vec::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CoreError::Checkpoint("non-UTF-8 tensor name".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor { shape, data, requires_grad: true, grad: None };
        match name.strip_prefix("extra.") {
            Some(rest) => extra.push((rest.to_string(), tensor)),
            None => params.insert(&name, tensor),
        }
    }
    Ok(LoadedCheckpoint { kind: meta.kind, config: meta.config, step: meta.step, params, extra })
}

/// Load and verify model kind, and configuration when one is expected.
pub fn load_checkpoint_expecting(
    path: &Path,
    kind: ModelKind,
    config: Option<&ModelConfig>,
) -> Result<LoadedCheckpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != kind {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint holds a {:?} model, expected {:?}",
            ckpt.kind, kind
        )));
    }
    if let Some(expected) = config {
        if &ckpt.config != expected {
            return Err(CoreError::Checkpoint(
                "checkpoint config does not match the requested configuration".into(),
            ));
        }
    }
    Ok(ckpt)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
