//! Binary checkpoint container.
//!
//! Layout: 4-byte magic, u32 format version, length-prefixed JSON header
//! (hyperparameters, schedule constants, normalization constants, config
//! hash), then named parameter sections. Each section is the name, the
//! row-major dims, and a length-prefixed flat array of little-endian f32.
//! Save(load(x)) reproduces x byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::datagen::{RSRP_MAX_DBM, RSRP_MIN_DBM};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const MAX_HEADER_BYTES: usize = 1 << 20;
const MAX_NAME_BYTES: usize = 4096;
const MAX_DIMS: usize = 8;
const MAX_ELEMS: u64 = 100_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub schedule_k: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub rsrp_min_dbm: f64,
    pub rsrp_max_dbm: f64,
}

impl CheckpointHeader {
    pub fn new(model: &Model, schedule_k: usize, beta_start: f64, beta_end: f64, config_hash: String) -> Self {
        CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash,
            model: model.cfg,
            schedule_k,
            beta_start,
            beta_end,
            rsrp_min_dbm: RSRP_MIN_DBM,
            rsrp_max_dbm: RSRP_MAX_DBM,
        }
    }
}

fn push_section(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn sections_of(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let store = |prefix: &str, s: &ParamStore, out: &mut Vec<(String, Tensor)>| {
        for (name, t) in s.iter() {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    };
    store("backbone", &model.backbone.store, &mut out);
    out.push(("backbone.pos_table".to_string(), model.backbone.pos_table.clone()));
    store("prompt", &model.prompt.store, &mut out);
    store("vae.bs", &model.vaes.bs.store, &mut out);
    store("vae.app", &model.vaes.app.store, &mut out);
    store("vae.rsrp", &model.vaes.rsrp.store, &mut out);
    out
}

pub fn save_bytes(model: &Model, header: &CheckpointHeader) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    let hjson = serde_json::to_vec(header).expect("header serialization");
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    let sections = sections_of(model);
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, t) in &sections {
        push_section(&mut out, name, t);
    }
    out
}

pub fn save(path: &Path, model: &Model, header: &CheckpointHeader) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, save_bytes(model, header))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse("checkpoint truncated".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parse a checkpoint byte image; never panics on malformed input.
pub fn load_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, Model)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::parse("bad checkpoint magic".to_string()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::parse(format!("unsupported checkpoint version {version}")));
    }
    let hlen = c.u32()? as usize;
    if hlen > MAX_HEADER_BYTES {
        return Err(Error::parse("header too large".to_string()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::parse(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::parse("header version mismatch".to_string()));
    }
    header.model.validate().map_err(|e| Error::parse(format!("model config: {e}")))?;
    if header.schedule_k < 2 || header.schedule_k > 100_000 {
        return Err(Error::parse("unreasonable schedule length".to_string()));
    }

    let n_sections = c.u32()? as usize;
    if n_sections > 100_000 {
        return Err(Error::parse("too many sections".to_string()));
    }
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let nlen = c.u16()? as usize;
        if nlen > MAX_NAME_BYTES {
            return Err(Error::parse("section name too long".to_string()));
        }
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::parse("section name is not utf-8".to_string()))?
            .to_string();
        let ndim = c.u8()? as usize;
        if ndim > MAX_DIMS {
            return Err(Error::parse("too many dims".to_string()));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut prod: u64 = 1;
        for _ in 0..ndim {
            let d = c.u32()? as u64;
            prod = prod.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        let count = c.u64()?;
        if count > MAX_ELEMS || prod > MAX_ELEMS {
            return Err(Error::parse("section too large".to_string()));
        }
        let expect: u64 = shape.iter().map(|&d| d as u64).product();
        if expect != count {
            return Err(Error::parse(format!("section {name}: count {count} != dims product {expect}")));
        }
        let raw = c.take(count as usize * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        loaded.push((name, Tensor::new(shape, data)));
    }
    if c.pos != bytes.len() {
        return Err(Error::parse("trailing bytes after sections".to_string()));
    }

    // materialize a model of the right architecture, then overwrite every
    // tensor from the sections
    let mut model = Model::init(header.model, 0).map_err(|e| Error::parse(format!("init: {e}")))?;
    let expected = sections_of(&model);
    if expected.len() != loaded.len() {
        return Err(Error::parse(format!(
            "expected {} sections, found {}",
            expected.len(),
            loaded.len()
        )));
    }
    let mut by_name: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
    for (name, t) in loaded {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::parse(format!("duplicate section {name}")));
        }
    }
    let mut assign = |prefix: &str, store: &mut ParamStore| -> Result<()> {
        for i in 0..store.len() {
            let key = format!("{prefix}.{}", store.name(i));
            let t = by_name
                .remove(&key)
                .ok_or_else(|| Error::parse(format!("missing section {key}")))?;
            if t.shape() != store.tensor(i).shape() {
                return Err(Error::parse(format!(
                    "section {key}: shape {:?} does not match architecture {:?}",
                    t.shape(),
                    store.tensor(i).shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::parse(format!("section {key}: non-finite parameter")));
            }
            *store.tensor_mut(i) = t;
            Ok::<(), Error>(())?;
        }
        Ok(())
    };
    assign("backbone", &mut model.backbone.store)?;
    assign("prompt", &mut model.prompt.store)?;
    assign("vae.bs", &mut model.vaes.bs.store)?;
    assign("vae.app", &mut model.vaes.app.store)?;
    assign("vae.rsrp", &mut model.vaes.rsrp.store)?;

    let pos = by_name
        .remove("backbone.pos_table")
        .ok_or_else(|| Error::parse("missing section backbone.pos_table".to_string()))?;
    if pos.shape() != model.backbone.pos_table.shape() {
        return Err(Error::parse("pos_table shape mismatch".to_string()));
    }
    if !pos.is_finite() {
        return Err(Error::parse("pos_table has non-finite entries".to_string()));
    }
    model.backbone.pos_table = pos;

    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::parse(format!("unexpected section {name}")));
    }
    Ok((header, model))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Model)> {
    let bytes = std::fs::read(path)?;
    load_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            l: 16,
            c0: 8,
            c_cond: 8,
            n_blocks: 1,
            n_heads: 2,
            ff_mult: 2,
            feat_dim: 4,
            vae_hidden: 8,
            ..Default::default()
        };
        Model::init(cfg, 11).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_exact_and_model_equal() {
        let model = tiny_model();
        let header = CheckpointHeader::new(&model, 10, 1e-4, 0.05, "deadbeef".to_string());
        let bytes = save_bytes(&model, &header);
        let (h2, m2) = load_bytes(&bytes).unwrap();
        assert_eq!(h2, header);
        assert_eq!(m2, model);
        assert_eq!(save_bytes(&m2, &h2), bytes);
    }

    #[test]
    fn loader_rejects_corruption() {
        let model = tiny_model();
        let header = CheckpointHeader::new(&model, 10, 1e-4, 0.05, "x".to_string());
        let bytes = save_bytes(&model, &header);
        assert!(load_bytes(&[]).is_err());
        assert!(load_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(load_bytes(&bad_magic).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_bytes(&extra).is_err());
    }

    #[test]
    fn loader_rejects_nan_params() {
        let model = tiny_model();
        let header = CheckpointHeader::new(&model, 10, 1e-4, 0.05, "x".to_string());
        let mut bytes = save_bytes(&model, &header);
        // corrupt one f32 payload with NaN near the end (inside the last section)
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(load_bytes(&bytes).is_err());
    }
}
