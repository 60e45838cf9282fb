//! Binary model checkpoints: a little-endian container holding a JSON
//! header (config, feature layout, preprocessor hash) followed by the named
//! parameter tensors as raw f64 bytes. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

use super::{FeatureLayout, Model, ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"FSNT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Keep garbage length fields from looking like gigantic allocations.
const MAX_NAME_LEN: usize = 4 * 1024;
const MAX_RANK: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    layout: FeatureLayout,
    preprocessor_hash: String,
}

/// A checkpoint read back from disk. The preprocessor hash travels alongside
/// the model so callers can detect a state file swapped out from under it.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub preprocessor_hash: String,
}

impl LoadedCheckpoint {
    /// Compares the stored hash against a live preprocessor's content hash;
    /// a mismatch is worth a warning, not a refusal — the caller decides.
    pub fn hash_mismatch(&self, live_hash: &str) -> Option<String> {
        (live_hash != self.preprocessor_hash).then(|| {
            format!(
                "checkpoint was trained against preprocessor {} but the \
                 loaded state hashes to {live_hash}",
                self.preprocessor_hash
            )
        })
    }
}

/// Serializes a model plus the hash of the preprocessor it was trained with.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    preprocessor_hash: &str,
) -> Result<(), ModelError> {
    let header = Header {
        config: model.config().clone(),
        layout: model.layout().clone(),
        preprocessor_hash: preprocessor_hash.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(header_bytes.len()).unwrap().to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&u32::try_from(model.params().len()).unwrap().to_le_bytes());
    for (name, tensor) in model.params().iter() {
        out.extend_from_slice(&u32::try_from(name.len()).unwrap().to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32::try_from(tensor.rank()).unwrap().to_le_bytes());
        for &extent in tensor.shape() {
            out.extend_from_slice(&u32::try_from(extent).unwrap().to_le_bytes());
        }
        for &x in tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back, rebuilding the model and validating every
/// tensor's name and shape against the header's config.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, ModelError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };

    if r.take(4, "magic")? != MAGIC {
        return Err(ModelError::CheckpointMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = r.len("header length", r.remaining())?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)?;

    let count = r.len("tensor count", usize::MAX)?;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.len("tensor name length", MAX_NAME_LEN)?;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| ModelError::CheckpointParams {
                detail: "tensor name is not UTF-8".into(),
            })?;
        let rank = r.len("tensor rank", MAX_RANK)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("tensor extent", usize::MAX / 8)?);
        }
        let elements = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or(ModelError::CheckpointTruncated { what: "tensor extents" })?;
        let raw = r.take(
            elements
                .checked_mul(8)
                .ok_or(ModelError::CheckpointTruncated { what: "tensor extents" })?,
            "tensor data",
        )?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::CheckpointParams {
                detail: format!("tensor {name} holds non-finite values"),
            });
        }
        let tensor = Tensor::new(shape, data).map_err(|e| ModelError::CheckpointParams {
            detail: format!("tensor {name}: {e}"),
        })?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(ModelError::CheckpointParams {
                detail: format!("tensor {name} appears twice"),
            });
        }
    }
    if r.remaining() != 0 {
        return Err(ModelError::CheckpointParams {
            detail: format!("{} trailing bytes after the last tensor", r.remaining()),
        });
    }

    let mut model = Model::build(header.config, header.layout)?;
    let expected: Vec<String> = model.params().names().cloned().collect();
    for name in &expected {
        let Some(tensor) = tensors.remove(name) else {
            return Err(ModelError::CheckpointParams {
                detail: format!("tensor {name} is missing"),
            });
        };
        let want = model.params().get(name).expect("name from this set").shape();
        if want != tensor.shape() {
            return Err(ModelError::CheckpointParams {
                detail: format!(
                    "tensor {name} has shape {:?}, config implies {want:?}",
                    tensor.shape()
                ),
            });
        }
        model.params_mut().set(name, tensor);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ModelError::CheckpointParams {
            detail: format!("tensor {extra} does not belong to this config"),
        });
    }

    Ok(LoadedCheckpoint {
        model,
        preprocessor_hash: header.preprocessor_hash,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelError> {
        if n > self.remaining() {
            return Err(ModelError::CheckpointTruncated { what });
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ModelError> {
        let raw = self.take(4, what)?;
        Ok(u32::from_le_bytes(raw.try_into().unwrap()))
    }

    /// A u32 length field, validated against `cap` so corrupted bytes fail
    /// cleanly instead of driving huge reads.
    fn len(&mut self, what: &'static str, cap: usize) -> Result<usize, ModelError> {
        let n = self.u32(what)? as usize;
        if n > cap {
            return Err(ModelError::CheckpointTruncated { what });
        }
        Ok(n)
    }
}
