//! Checkpoint files: a version line, a one-line JSON manifest, then every
//! tensor as little-endian `f32` values in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swarmnet_nn::{ParamStore, Scalar};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, StgnnModel, Variant};

pub const CHECKPOINT_MAGIC: &str = "SWARMNET-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub spec_hash: String,
    pub seed: u64,
    pub dtype: String,
    pub init: String,
    /// Hash of the swarm configuration the model was trained on.
    pub config_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<StgnnModel<f32>> {
        StgnnModel::from_params(self.manifest.spec, self.manifest.seed, self.params)
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn spec_hash(spec: &ModelSpec) -> String {
    sha_hex(&serde_json::to_vec(spec).expect("spec serializes"))
}

pub fn encode_checkpoint<T: Scalar>(model: &StgnnModel<T>, config_hash: Option<&str>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.params().num_scalars() * 4);
    let mut tensors = Vec::with_capacity(model.params().len());
    for t in model.params().iter() {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape(),
            offset: payload.len(),
        });
        for &x in t.value.iter() {
            payload.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        spec: model.spec().clone(),
        spec_hash: spec_hash(model.spec()),
        seed: model.seed(),
        dtype: "f32-le".into(),
        init: "uniform(+-sqrt(1/fan_in))".into(),
        config_hash: config_hash.map(str::to_string),
        tensors,
        payload_bytes: payload.len(),
        payload_sha256: sha_hex(&payload),
    };
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
    out.extend(serde_json::to_vec(&manifest).expect("manifest serializes"));
    out.push(b'\n');
    out.extend(payload);
    out
}

pub fn save_checkpoint<T: Scalar>(
    model: &StgnnModel<T>,
    config_hash: Option<&str>,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, config_hash))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| Error::Corrupt {
        kind: "checkpoint",
        path: path.to_path_buf(),
        reason,
    };
    let (head, rest) = split_line(bytes).ok_or_else(|| corrupt("missing header line".into()))?;
    let head = std::str::from_utf8(head).map_err(|_| corrupt("header is not text".into()))?;
    let version = head
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| corrupt(format!("unrecognized header `{head}`")))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            kind: "checkpoint",
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (man, payload) = split_line(rest).ok_or_else(|| corrupt("missing manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(man).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    if manifest.spec_hash != spec_hash(&manifest.spec) {
        return Err(corrupt("manifest spec hash mismatch".into()));
    }
    if manifest.dtype != "f32-le" {
        return Err(corrupt(format!("unsupported dtype {}", manifest.dtype)));
    }
    if payload.len() != manifest.payload_bytes {
        return Err(corrupt(format!(
            "payload has {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if sha_hex(payload) != manifest.payload_sha256 {
        return Err(corrupt("payload hash mismatch".into()));
    }
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        let len = t.shape[0] * t.shape[1];
        let bytes = payload
            .get(t.offset..t.offset + 4 * len)
            .ok_or_else(|| corrupt(format!("tensor {} out of bounds", t.name)))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let arr = ndarray::Array2::from_shape_vec((t.shape[0], t.shape[1]), values)
            .map_err(|e| corrupt(e.to_string()))?;
        params.add(t.name.clone(), arr)?;
    }
    // Shapes against the architecture.
    StgnnModel::<f32>::from_params(manifest.spec.clone(), manifest.seed, params.clone())?;
    Ok(Checkpoint { manifest, params })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a model and checks that it is of the expected variant.
pub fn load_model(path: &Path, expected: Option<Variant>) -> Result<StgnnModel<f32>> {
    let ckpt = load_checkpoint(path)?;
    if let Some(v) = expected {
        if ckpt.manifest.spec.variant != v {
            return Err(Error::VariantMismatch {
                expected: v.to_string(),
                found: ckpt.manifest.spec.variant.to_string(),
            });
        }
    }
    ckpt.into_model()
}

pub(crate) fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(v: Variant) -> StgnnModel<f32> {
        let mut spec = ModelSpec::new(v, 1, 2);
        spec.embed_width = 8;
        spec.heads = 2;
        spec.ff_width = 4;
        spec.head_hidden = 8;
        StgnnModel::new(spec, 11).unwrap()
    }

    #[test]
    fn byte_exact_round_trip() {
        let m = model(Variant::Stgnn);
        let bytes = encode_checkpoint(&m, Some("abc"));
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.manifest.config_hash.as_deref(), Some("abc"));
        let m2 = back.into_model().unwrap();
        assert_eq!(encode_checkpoint(&m2, Some("abc")), bytes);
        for (a, b) in m.params().iter().zip(m2.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = encode_checkpoint(&model(Variant::Tgnn), None);
        for cut in [5, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut], Path::new("t")),
                Err(Error::Corrupt { .. })
            ));
        }
    }

    #[test]
    fn flipped_payload_byte_is_corrupt() {
        let mut bytes = encode_checkpoint(&model(Variant::Tgnn), None);
        let n = bytes.len();
        bytes[n - 3] ^= 0x10;
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("t")),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn version_mismatch_reported() {
        let bytes = encode_checkpoint(&model(Variant::Tgnn), None);
        let text = String::from_utf8_lossy(&bytes[..30]).to_string();
        let nl = text.find('\n').unwrap();
        let mut changed = format!("{CHECKPOINT_MAGIC} 9").into_bytes();
        changed.extend_from_slice(&bytes[nl..]);
        assert!(matches!(
            decode_checkpoint(&changed, Path::new("t")),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn variant_mismatch_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        save_checkpoint(&model(Variant::Dgnn), None, &p).unwrap();
        assert!(matches!(
            load_model(&p, Some(Variant::Stgnn)),
            Err(Error::VariantMismatch { .. })
        ));
        assert!(load_model(&p, Some(Variant::Dgnn)).is_ok());
    }
}
