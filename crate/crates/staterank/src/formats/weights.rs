//! Parameter containers for the backbone (`SRWT`), the embedding head
//! (`SRHD`) and the reranker (`SRRW`).
//!
//! Layout: magic (4) | version u16 | dtype u8 | reserved u8 | config length
//! u32 | config JSON | tensor count u32 | per tensor: value count u64 +
//! values | CRC32. Tensors appear in the parameter visiting order of the
//! corresponding weights type.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use staterank_core::embedder::EmbeddingHeadWeights;
use staterank_core::reranker::{RerankerConfig, RerankerWeights};
use staterank_core::rwkv::{ModelConfig, ModelWeights};
use staterank_core::Params;

use super::{verify_crc, Decoder, Dtype, Encoder};
use crate::error::{Error, Result};
use crate::fsio;

pub const MODEL_MAGIC: &[u8; 4] = b"SRWT";
pub const HEAD_MAGIC: &[u8; 4] = b"SRHD";
pub const RERANKER_MAGIC: &[u8; 4] = b"SRRW";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d_model: usize,
    pub d_emb: usize,
}

fn encode<C: Serialize>(magic: &[u8; 4], config: &C, params: &dyn Params, dtype: Dtype) -> Vec<u8> {
    let json = serde_json::to_vec(config).expect("configs serialize");
    let mut e = Encoder::default();
    e.bytes(magic);
    e.u16(VERSION);
    e.u8(dtype.code());
    e.u8(0);
    e.u32(json.len() as u32);
    e.bytes(&json);
    let mut tensors = Vec::new();
    params.visit(&mut |s| tensors.push(s.to_vec()));
    e.u32(tensors.len() as u32);
    for t in &tensors {
        e.u64(t.len() as u64);
        e.values(dtype, t);
    }
    e.finish()
}

fn decode<C: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(C, Vec<Vec<f64>>)> {
    let bytes = fsio::read(path)?;
    let body = verify_crc(&bytes, path)?;
    let mut d = Decoder::new(body, path);
    if d.take(4)? != magic {
        return Err(Error::format(
            path,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = d.u16()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(d.u8()?).ok_or_else(|| Error::format(path, "unknown dtype"))?;
    d.u8()?;
    let n = d.u32()? as usize;
    let config = serde_json::from_slice(d.take(n)?).map_err(|e| Error::format(path, format!("config: {e}")))?;
    let count = d.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = d.u64()? as usize;
        tensors.push(d.values(dtype, len)?);
    }
    if d.pos() != body.len() {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    Ok((config, tensors))
}

/// Overwrite `template`'s parameters with `tensors`, checking every length.
fn fill(path: &Path, template: &mut dyn Params, tensors: Vec<Vec<f64>>) -> Result<()> {
    let mut it = tensors.into_iter();
    let mut err = None;
    template.visit_mut(&mut |slot| {
        if err.is_some() {
            return;
        }
        match it.next() {
            Some(t) if t.len() == slot.len() => slot.copy_from_slice(&t),
            Some(t) => err = Some(format!("tensor has {} values, expected {}", t.len(), slot.len())),
            None => err = Some("too few tensors".into()),
        }
    });
    if err.is_none() && it.next().is_some() {
        err = Some("too many tensors".into());
    }
    match err {
        Some(msg) => Err(Error::format(path, msg)),
        None => Ok(()),
    }
}

/// Saved at the model's own precision.
pub fn save_model(path: &Path, model: &ModelWeights) -> Result<()> {
    let dtype = Dtype::from(model.config().precision);
    fsio::write_atomic(path, &encode(MODEL_MAGIC, model.config(), model, dtype))
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    let (config, tensors): (ModelConfig, _) = decode(path, MODEL_MAGIC)?;
    config.validate()?;
    let mut model = ModelWeights::init(config, 0)?;
    fill(path, &mut model, tensors)?;
    Ok(model)
}

pub fn save_head(path: &Path, head: &EmbeddingHeadWeights, dtype: Dtype) -> Result<()> {
    let cfg = HeadConfig {
        d_model: head.d_model(),
        d_emb: head.d_emb(),
    };
    fsio::write_atomic(path, &encode(HEAD_MAGIC, &cfg, head, dtype))
}

pub fn load_head(path: &Path) -> Result<EmbeddingHeadWeights> {
    let (cfg, tensors): (HeadConfig, _) = decode(path, HEAD_MAGIC)?;
    if cfg.d_model == 0 || cfg.d_emb == 0 {
        return Err(Error::format(path, "zero head dimension"));
    }
    let mut head = EmbeddingHeadWeights::init(cfg.d_model, cfg.d_emb, 0);
    fill(path, &mut head, tensors)?;
    Ok(head)
}

pub fn save_reranker(path: &Path, rw: &RerankerWeights, dtype: Dtype) -> Result<()> {
    fsio::write_atomic(path, &encode(RERANKER_MAGIC, rw.config(), rw, dtype))
}

pub fn load_reranker(path: &Path) -> Result<RerankerWeights> {
    let (cfg, tensors): (RerankerConfig, _) = decode(path, RERANKER_MAGIC)?;
    let mut rw = RerankerWeights::init(cfg, 0)?;
    fill(path, &mut rw, tensors)?;
    Ok(rw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use staterank_core::state_store::LayerSelection;
    use staterank_core::tensor::Precision;

    #[test]
    fn model_round_trip_keeps_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.srwt");
        for precision in [Precision::F64, Precision::F32] {
            let cfg = ModelConfig {
                precision,
                ..ModelConfig::new(2, 2, 4)
            };
            let m = ModelWeights::init(cfg, 5).unwrap();
            save_model(&p, &m).unwrap();
            let back = load_model(&p).unwrap();
            assert_eq!(back.fingerprint(), m.fingerprint());
            assert_eq!(back.checksum(), m.checksum());
        }
    }

    #[test]
    fn head_and_reranker_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let head = EmbeddingHeadWeights::init(8, 8, 1);
        let hp = dir.path().join("h.srhd");
        save_head(&hp, &head, Dtype::F64).unwrap();
        assert_eq!(load_head(&hp).unwrap(), head);

        let cfg = RerankerConfig::new(&ModelConfig::new(3, 2, 4), &LayerSelection::TopHeavy(2)).unwrap();
        let rw = RerankerWeights::init(cfg, 2).unwrap();
        let rp = dir.path().join("r.srrw");
        save_reranker(&rp, &rw, Dtype::F64).unwrap();
        assert_eq!(load_reranker(&rp).unwrap(), rw);
        assert!(load_head(&rp).is_err(), "magic must be checked");
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.srwt");
        save_model(&p, &ModelWeights::init(ModelConfig::new(1, 1, 4), 1).unwrap()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Crc { .. })));
        std::fs::write(&p, &bytes[..10]).unwrap();
        assert!(load_model(&p).is_err());
    }
}
