//! Model checkpoints: magic bytes, a little-endian `u64` header length, a
//! JSON header (config, vocabulary, ledger), then the raw little-endian
//! `f64` parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 8] = b"DPTWIN01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub ledger: PrivacyLedger,
    /// Free-form provenance (seed, config hash, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub num_params: usize,
}

pub fn to_bytes(model: &LanguageModel, ledger: &PrivacyLedger, metadata: serde_json::Value) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        vocabulary: model.vocab().clone(),
        ledger: ledger.clone(),
        metadata,
        num_params: model.num_params(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(LanguageModel, Header), String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err("truncated header".into());
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| format!("bad header: {e}"))?;
    let raw = &body[len..];
    if raw.len() != 8 * header.num_params {
        return Err(format!(
            "parameter block holds {} bytes, expected {}",
            raw.len(),
            8 * header.num_params
        ));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = LanguageModel::from_params(header.config.clone(), header.vocabulary.clone(), params)
        .map_err(|e| e.to_string())?;
    Ok((model, header))
}

pub fn save(
    path: impl AsRef<Path>,
    model: &LanguageModel,
    ledger: &PrivacyLedger,
    metadata: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model, ledger, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(LanguageModel, Header)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_from_texts;

    #[test]
    fn round_trip_and_corruption() {
        let vocab = build_from_texts(["a b c"], 64).unwrap();
        let mut cfg = ModelConfig::new(vocab.len());
        cfg.embed_dim = 4;
        cfg.hidden_dim = 4;
        cfg.context_length = 8;
        let model = LanguageModel::new(cfg, vocab).unwrap();
        let mut ledger = PrivacyLedger::default();
        ledger.record(1.5, 0.1, 7).unwrap();
        let bytes = to_bytes(&model, &ledger, serde_json::json!({"seed": 3}));
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(header.ledger, ledger);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"garbage!garbage!").is_err());
    }
}
