//! Single-file model container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "MLNETART"            8-byte magic
//! version               u32
//! metadata length       u64
//! metadata              UTF-8 JSON
//! tensor count          u64
//! per tensor:
//!   name length, name   u32, UTF-8
//!   ndim, dims          u32, u64 * ndim
//!   value count         u64
//!   values              f64 * count
//! sha256                32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use mlnet_core::corpus::LabelVocabulary;
use mlnet_core::encoder::EncoderConfig;
use mlnet_core::params::TensorView;
use mlnet_core::preprocess::PreprocessConfig;
use mlnet_core::trainer::{ModelBundle, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MLNETART";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("cannot access model artifact {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model artifact (bad magic)")]
    BadMagic,
    #[error("unsupported artifact format version {0}")]
    UnsupportedVersion(u32),
    #[error("artifact is truncated")]
    Truncated,
    #[error("artifact checksum mismatch (file is corrupt)")]
    ChecksumMismatch,
    #[error("checksum mismatch in tensor `{0}`")]
    TensorChecksum(String),
    #[error("invalid artifact metadata: {0}")]
    Metadata(String),
    #[error("artifact tensors do not match its configuration: {0}")]
    Layout(String),
}

/// Everything needed to rebuild the model's shapes and preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub task: String,
    pub encoder: EncoderConfig,
    pub count_hidden: Vec<usize>,
    pub max_labels: usize,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMetadata {
    pub format_version: u32,
    pub config: ModelSnapshot,
    pub vocabulary: Vec<String>,
    pub hierarchy_digest: Option<String>,
    pub seed: u64,
    pub count_head_trained: bool,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub metadata: ArtifactMetadata,
    pub bundle: ModelBundle,
}

fn tensor_digest(data: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in data {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

fn records(views: &[TensorView<'_>]) -> Vec<TensorRecord> {
    views
        .iter()
        .map(|t| TensorRecord {
            name: t.name.clone(),
            shape: t.shape.clone(),
            sha256: tensor_digest(t.data),
        })
        .collect()
}

impl ModelArtifact {
    pub fn new(
        bundle: ModelBundle,
        task: &str,
        train: TrainConfig,
        hierarchy_digest: Option<String>,
    ) -> Self {
        let metadata = ArtifactMetadata {
            format_version: FORMAT_VERSION,
            config: ModelSnapshot {
                task: task.to_string(),
                encoder: bundle.encoder.config(),
                count_hidden: bundle.count_head.hidden_dims(),
                max_labels: bundle.max_labels,
                preprocess: bundle.preprocess.clone(),
                train: train.clone(),
            },
            vocabulary: bundle.vocab.labels().to_vec(),
            hierarchy_digest,
            seed: train.seed,
            count_head_trained: bundle.count_head_trained,
            tensors: records(&bundle.all_tensors()),
        };
        ModelArtifact { metadata, bundle }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        let tensors = self.bundle.all_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArtifactError> {
        if bytes.len() < MAGIC.len() {
            return Err(ArtifactError::Truncated);
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(ArtifactError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(ArtifactError::Truncated);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(ArtifactError::ChecksumMismatch);
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ArtifactError::UnsupportedVersion(version));
        }
        let meta_len = r.len()?;
        let metadata: ArtifactMetadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| ArtifactError::Metadata(e.to_string()))?;

        let count = r.len()?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| ArtifactError::Metadata("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
            let n = r.len()?;
            let raw = r.take(n.checked_mul(8).ok_or(ArtifactError::Truncated)?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, shape, data));
        }
        if r.pos != body.len() {
            return Err(ArtifactError::Layout("trailing bytes after tensors".into()));
        }

        if tensors.len() != metadata.tensors.len() {
            return Err(ArtifactError::Layout(
                "tensor count differs from metadata".into(),
            ));
        }
        for ((name, shape, data), rec) in tensors.iter().zip(&metadata.tensors) {
            if *name != rec.name || *shape != rec.shape {
                return Err(ArtifactError::Layout(format!("unexpected tensor `{name}`")));
            }
            if tensor_digest(data) != rec.sha256 {
                return Err(ArtifactError::TensorChecksum(name.clone()));
            }
        }

        let bundle = rebuild_bundle(&metadata, tensors)?;
        Ok(ModelArtifact { metadata, bundle })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        fs::write(path, self.to_bytes()).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let bytes = fs::read(path).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn rebuild_bundle(
    metadata: &ArtifactMetadata,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
) -> Result<ModelBundle, ArtifactError> {
    let cfg = &metadata.config;
    let vocab = LabelVocabulary::from_labels(metadata.vocabulary.iter().cloned());
    if vocab.labels() != metadata.vocabulary.as_slice() {
        return Err(ArtifactError::Metadata(
            "vocabulary must be sorted and free of duplicates".into(),
        ));
    }
    if cfg.max_labels == 0 {
        return Err(ArtifactError::Metadata(
            "max_labels must be at least 1".into(),
        ));
    }
    let mut bundle = ModelBundle::new(
        &cfg.encoder,
        &cfg.count_hidden,
        cfg.max_labels,
        cfg.preprocess.clone(),
        vocab,
        0,
    );
    bundle.count_head_trained = metadata.count_head_trained;
    let targets = bundle.all_tensors_mut();
    if targets.len() != tensors.len() {
        return Err(ArtifactError::Layout(format!(
            "expected {} tensors, found {}",
            targets.len(),
            tensors.len()
        )));
    }
    for (target, (name, shape, data)) in targets.into_iter().zip(tensors) {
        if target.name != name || target.shape != shape || target.data.len() != data.len() {
            return Err(ArtifactError::Layout(format!(
                "tensor `{name}` {shape:?} does not fit `{}` {:?}",
                target.name, target.shape
            )));
        }
        target.data.copy_from_slice(&data);
    }
    Ok(bundle)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArtifactError> {
        let end = self.pos.checked_add(n).ok_or(ArtifactError::Truncated)?;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or(ArtifactError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ArtifactError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize, ArtifactError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| ArtifactError::Truncated)
    }
}
