//! Self-describing binary checkpoints and atomic file writes.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MXLB" | version u32 | config length u32 | config (TOML, UTF-8)
//! per tensor in layout order: rank u32 | dims u32 × rank | f32 × product(dims)
//! FNV-1a 64 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerParams};
use crate::taskgen::TaskSpec;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MXLB";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild and re-evaluate a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode(config: &RunConfig, params: &TransformerParams<f32>) -> Result<Vec<u8>> {
    if config.model != params.config {
        return Err(Error::Checkpoint("run config disagrees with parameter config".into()));
    }
    let text = toml::to_string(config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut out = Vec::with_capacity(16 + text.len() + 4 * params.config.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(RunConfig, TransformerParams<f32>)> {
    if bytes.len() < 20 {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: {} bytes is too short to be a checkpoint",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let config: RunConfig =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config.model.validate()?;
    let mut tensors = Vec::new();
    for (name, shape) in config.model.layout() {
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {dims:?}, config implies {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::from_vec(&dims, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            body.len() - r.pos
        )));
    }
    let params = TransformerParams::from_tensors(config.model.clone(), tensors)?;
    Ok((config, params))
}

pub fn save(path: &Path, config: &RunConfig, params: &TransformerParams<f32>) -> Result<()> {
    write_atomic(path, &encode(config, params)?)
}

pub fn load(path: &Path) -> Result<(RunConfig, TransformerParams<f32>)> {
    decode(&fs::read(path)?)
}

/// Writes to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
