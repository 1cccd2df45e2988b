//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DFNDCKPT" | u32 version | u8 scheme | u8 stage | u16 reserved
//! u32 n_t n_r d_model n_layers n_heads d_ff max_pairs
//! u32 tensor count
//! per tensor: u16 name length, name (utf-8), u8 rank, u32 dims...
//! f32 values of every tensor in header order
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{ModelConfig, TransformerParams};
use crate::constellation::Scheme;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DFNDCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// How far training got when the parameters were saved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingStage {
    Initialized,
    /// After supervised training on clean prompts.
    Icl,
    /// After decision-feedback fine-tuning.
    Finetuned,
}

impl TrainingStage {
    fn tag(self) -> u8 {
        match self {
            TrainingStage::Initialized => 0,
            TrainingStage::Icl => 1,
            TrainingStage::Finetuned => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        [TrainingStage::Initialized, TrainingStage::Icl, TrainingStage::Finetuned]
            .get(tag as usize)
            .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainingStage::Initialized => "init",
            TrainingStage::Icl => "icl",
            TrainingStage::Finetuned => "finetuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: TransformerParams,
    pub stage: TrainingStage,
}

pub fn save_checkpoint(path: &Path, params: &TransformerParams, stage: TrainingStage) -> Result<()> {
    let cfg = params.config();
    let mut buf = Vec::with_capacity(64 + 4 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(cfg.scheme.tag());
    buf.push(stage.tag());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for v in [cfg.n_t, cfg.n_r, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_pairs] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for t in params.tensors() {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for &v in params.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: PathBuf::from(self.path),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.fail(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let scheme_tag = r.u8()?;
    let scheme = Scheme::from_tag(scheme_tag).ok_or_else(|| r.fail(format!("unknown modulation tag {scheme_tag}")))?;
    let stage_tag = r.u8()?;
    let stage = TrainingStage::from_tag(stage_tag).ok_or_else(|| r.fail(format!("unknown stage tag {stage_tag}")))?;
    r.u16()?;
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        scheme,
        n_t: dims[0],
        n_r: dims[1],
        d_model: dims[2],
        n_layers: dims[3],
        n_heads: dims[4],
        d_ff: dims[5],
        max_pairs: dims[6],
    };
    config.validate().map_err(|e| r.fail(e.to_string()))?;
    let expected = TransformerParams::zeros(config)?;
    let count = r.u32()? as usize;
    if count != expected.tensors().len() {
        return Err(r.fail(format!("{count} tensors, configuration implies {}", expected.tensors().len())));
    }
    for t in expected.tensors() {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("tensor name is not utf-8"))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if name != t.name || shape != t.shape {
            return Err(r.fail(format!(
                "tensor {name} {shape:?} does not match expected {} {:?}",
                t.name, t.shape
            )));
        }
    }
    let n = expected.len();
    if buf.len() - r.pos != 4 * n {
        return Err(r.fail(format!("{} data bytes, expected {}", buf.len() - r.pos, 4 * n)));
    }
    let data: Vec<f64> = r
        .take(4 * n)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(r.fail("non-finite parameter values"));
    }
    let params = TransformerParams::from_vec(config, data)?;
    Ok(Checkpoint { params, stage })
}
