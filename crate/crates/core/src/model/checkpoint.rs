//! Checkpoint files: a magic line, the byte length of a TOML header, the
//! header itself (format version, dtype, model configuration, parameter paths
//! and shapes), then every parameter as little-endian f64 in path order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::artifact::atomic_write;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "TRANAD-CHECKPOINT";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    model: ModelConfig,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: "f64".into(),
        model: state.config.clone(),
        params: state
            .params
            .iter()
            .map(|(p, t)| ParamEntry {
                path: p.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Serialize(e.to_string()))?;
    let mut out = format!("{MAGIC}\n{}\n{text}", text.len()).into_bytes();
    for (_, t) in state.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(MAGIC.as_bytes()) {
        return Err(bad("not a checkpoint file"));
    }
    let len: usize = lines
        .next()
        .and_then(|l| std::str::from_utf8(l).ok())
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| bad("missing header length"))?;
    let rest = lines.next().ok_or_else(|| bad("truncated header"))?;
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let text = std::str::from_utf8(&rest[..len]).map_err(|_| bad("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {}",
            header.dtype
        )));
    }
    let mut payload = &rest[len..];
    let mut params = ParamStore::new();
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        if payload.len() < n * 8 {
            return Err(bad("truncated parameter data"));
        }
        let data = payload[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        payload = &payload[n * 8..];
        params.insert(entry.path, Tensor::new(entry.shape, data)?)?;
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after parameter data"));
    }
    ModelState::from_params(header.model, params)
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    atomic_write(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let state = ModelState::new(ModelConfig::new(3), 11).unwrap();
        let bytes = encode_checkpoint(&state).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, state.config);
        assert_eq!(back.params.flatten(), state.params.flatten());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let state = ModelState::new(ModelConfig::new(2), 1).unwrap();
        let bytes = encode_checkpoint(&state).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode_checkpoint(b"garbage").is_err());
        let text =
            String::from_utf8_lossy(&bytes).replace("format_version = 1", "format_version = 9");
        assert!(decode_checkpoint(text.as_bytes()).is_err());
    }
}
