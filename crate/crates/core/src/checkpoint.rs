//! Binary checkpoint: header, JSON metadata, named tensors, trailing SHA-256.
//!
//! Layout (little endian): `KACLCKPT`, u32 format version, u32 metadata
//! length, metadata JSON, u32 tensor count, then per tensor a u32 name length,
//! the UTF-8 name and the tensor encoding; finally the 32-byte digest of all
//! preceding bytes.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::ARTIFACT_VERSION;
use crate::error::{Error, Result};
use crate::models::{InferenceModel, KaclModel, ModelConfig};
use crate::radiomics::NormalizationStats;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"KACLCKPT";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub artifact_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub registry_hash: String,
    pub epoch: Option<usize>,
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub cam_threshold: f64,
    /// Radiomic z-score parameters; absent from inference-only checkpoints.
    pub normalization: Option<NormalizationStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &KaclModel, meta: CheckpointMeta) -> Self {
        let tensors = model.named_params().into_iter().map(|(n, t)| (n, strip_grad(t))).collect();
        Checkpoint { meta, tensors }
    }

    /// Keeps only what classification and localization need at test time.
    pub fn inference_only(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .filter(|(n, _)| InferenceModel::PREFIXES.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect();
        Checkpoint { meta: CheckpointMeta { normalization: None, ..self.meta.clone() }, tensors }
    }

    pub fn model(&self) -> Result<KaclModel> {
        KaclModel::from_named(self.meta.model.clone(), &self.tensors)
    }

    pub fn inference_model(&self) -> Result<InferenceModel> {
        InferenceModel::from_named(self.meta.model.clone(), &self.tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.to_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::data("not a checkpoint, or truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::data("checkpoint digest mismatch (truncated or corrupted)"));
        }
        let mut r = Cursor::new(&body[MAGIC.len()..]);
        let version = read_u32(&mut r)?;
        if version != ARTIFACT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(&read_exact(&mut r, meta_len)?)?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_exact(&mut r, len)?)
                .map_err(|_| Error::data("checkpoint tensor name is not UTF-8"))?;
            tensors.push((name, Tensor::read_from(&mut r)?));
        }
        if (r.position() as usize) != body.len() - MAGIC.len() {
            return Err(Error::data("trailing bytes after checkpoint tensors"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Short content identifier: leading hex of the trailing digest.
    pub fn id(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - DIGEST_LEN..][..8])
    }
}

fn strip_grad(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::data("checkpoint truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(n as u64).read_to_end(&mut v)?;
    if v.len() != n {
        return Err(Error::data("checkpoint truncated"));
    }
    Ok(v)
}
