//! model.bin: `u64` LE header length, a JSON header, then each tensor as
//! little-endian f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DetectorError, Result};
use crate::infer::{Model, MODEL_VERSION};
use crate::model::{ArchConfig, Network, CLASS_NAMES};
use crate::params::TensorSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub version: u32,
    pub arch: ArchConfig,
    pub seed: u64,
    pub classes: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl From<&TensorSpec> for TensorEntry {
    fn from(s: &TensorSpec) -> Self {
        Self {
            name: s.name.clone(),
            shape: s.shape.clone(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DetectorError + '_ {
    move |source| DetectorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    model.check_finite()?;
    let header = ModelHeader {
        version: MODEL_VERSION,
        arch: model.arch().clone(),
        seed: model.seed,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        tensors: model.net.layout.specs.iter().map(TensorEntry::from).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| DetectorError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * model.params.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for spec in &model.net.layout.specs {
        for v in &model.params[spec.offset..spec.offset + spec.len()] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| DetectorError::Format(m.to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().expect("8 bytes");
    let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length overflow"))?;
    let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: ModelHeader = serde_json::from_slice(json).map_err(|e| DetectorError::Format(e.to_string()))?;
    if header.version != MODEL_VERSION {
        return Err(DetectorError::Format(format!("unsupported version {}", header.version)));
    }
    if header.classes != CLASS_NAMES {
        return Err(bad("class list differs from this build"));
    }
    let net = Network::new(header.arch)?;
    let expected: Vec<TensorEntry> = net.layout.specs.iter().map(TensorEntry::from).collect();
    if header.tensors != expected {
        return Err(bad("tensor list does not match the architecture"));
    }
    let blob = &bytes[8 + hlen..];
    if blob.len() != 4 * net.n_params() {
        return Err(DetectorError::Format(format!(
            "expected {} parameter bytes, found {}",
            4 * net.n_params(),
            blob.len()
        )));
    }
    let mut params = vec![0.0; net.n_params()];
    let mut chunks = blob.chunks_exact(4);
    for spec in &net.layout.specs {
        for v in &mut params[spec.offset..spec.offset + spec.len()] {
            *v = f32::from_le_bytes(chunks.next().expect("sized").try_into().expect("4 bytes")) as f64;
        }
    }
    let model = Model {
        net,
        params,
        seed: header.seed,
    };
    model.check_finite()?;
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_model(&bytes)
}
