use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::model::{parameter_shapes, AttentionModel, ModelConfig};
use crate::nn::{ParamSet, Tensor};
use crate::problems::ProblemKind;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NEUROUTE";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    kind: ProblemKind,
    config: ModelConfig,
    step: u64,
    env_steps: u64,
    tensors: Vec<TensorEntry>,
}

/// A model together with the training counters it was saved at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AttentionModel<f32>,
    /// Optimizer steps taken.
    pub step: u64,
    pub env_steps: u64,
}

/// Writes `magic | version | header length | JSON header | f32 data | sha256`.
///
/// The file is written next to `path` and renamed into place.
pub fn save_checkpoint(path: &Path, model: &AttentionModel<f32>, step: u64, env_steps: u64) -> Result<(), HarnessError> {
    let params = model.params();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        kind: model.kind(),
        config: model.config().clone(),
        step,
        env_steps,
        tensors: (0..params.len())
            .map(|i| TensorEntry {
                name: params.name(i).to_string(),
                shape: params.value(i).shape().to_vec(),
                trainable: params.is_trainable(i),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| HarnessError::Format(e.to_string()))?;
    let mut bytes = Vec::with_capacity(PREFIX_LEN + json.len() + 4 * params.num_scalars() + DIGEST_LEN);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for i in 0..params.len() {
        for x in params.value(i).data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

/// Reads and verifies a checkpoint. Nothing is returned unless the digest,
/// version and every tensor shape check out.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint, HarnessError> {
    if bytes.len() < PREFIX_LEN + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(HarnessError::Format("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(HarnessError::Integrity("sha256 digest does not match the contents".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::Format(format!(
            "checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(PREFIX_LEN..PREFIX_LEN.saturating_add(header_len))
        .ok_or_else(|| HarnessError::Format("header length exceeds the file".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| HarnessError::Format(format!("bad header: {e}")))?;
    if header.format_version != version || header.dtype != "f32" {
        return Err(HarnessError::Format("header disagrees with the file prefix".into()));
    }
    let expected = parameter_shapes(header.kind, &header.config);
    let declared: Vec<(&str, &[usize], bool)> =
        header.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.trainable)).collect();
    let wanted: Vec<(&str, &[usize], bool)> = expected.iter().map(|(n, s, t)| (n.as_str(), s.as_slice(), *t)).collect();
    if declared != wanted {
        return Err(HarnessError::Format("tensor table does not match the model configuration".into()));
    }
    let mut data = &body[PREFIX_LEN + header_len..];
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if data.len() != 4 * total {
        return Err(HarnessError::Format(format!("expected {} data bytes, found {}", 4 * total, data.len())));
    }
    let mut params = ParamSet::new();
    for t in &header.tensors {
        let len: usize = t.shape.iter().product();
        let (chunk, rest) = data.split_at(4 * len);
        data = rest;
        let values: Vec<f32> = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let tensor = Tensor::new(t.shape.clone(), values);
        if t.trainable {
            params.add(t.name.clone(), tensor);
        } else {
            params.add_buffer(t.name.clone(), tensor);
        }
    }
    let model = AttentionModel::from_params(header.kind, header.config, params)?;
    Ok(Checkpoint { model, step: header.step, env_steps: header.env_steps })
}
