//! Checkpoint container.
//!
//! ```text
//! b"GCKP" | u32 version | u64 header length | JSON header | GTEN blobs
//! ```
//!
//! The header holds the config, vocabulary, counters, RNG state and the
//! tensor names in blob order: every parameter, then `adam.m.<name>` and
//! `adam.v.<name>` for each. All integers are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::language::Vocab;
use crate::model::Model;
use crate::tensor::{gten, AdamConfig, AdamState, ParamStore, RngState, Tensor};

pub const MAGIC: &[u8; 4] = b"GCKP";
pub const VERSION: u32 = 1;

/// Where training stands: `epoch` counts finished epochs, `batch` the
/// batches already taken from the current one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    progress: Progress,
    /// Shuffle RNG as of the start of the current epoch.
    rng: RngState,
    adam: AdamConfig,
    adam_step: u64,
    tensors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub progress: Progress,
    pub rng: RngState,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names: Vec<String> = self.store.iter().map(|(_, p)| p.name.clone()).collect();
        let mut tensors = names.clone();
        tensors.extend(names.iter().map(|n| format!("adam.m.{n}")));
        tensors.extend(names.iter().map(|n| format!("adam.v.{n}")));
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            progress: self.progress,
            rng: self.rng.clone(),
            adam: self.adam.config,
            adam_step: self.adam.step,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.store.iter() {
            out.extend(gten::encode(&p.value)?);
        }
        for t in self.adam.m.iter().chain(&self.adam.v) {
            out.extend(gten::encode(t)?);
        }
        Ok(out)
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(format_err(path, "not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(path, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| format_err(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| format_err(path, e))?;
        let vocab = Vocab::from_tokens(header.vocab.iter().skip(crate::language::RESERVED.len()))?;
        if vocab.tokens() != header.vocab.as_slice() {
            return Err(format_err(path, "vocabulary lacks the reserved prefix"));
        }
        let (mut store, model) = Model::new::<f32>(&header.config, vocab.len())?;
        let n = store.len();
        if header.tensors.len() != 3 * n {
            return Err(format_err(
                path,
                format!("{} tensors for {n} parameters", header.tensors.len()),
            ));
        }
        let mut pos = 16 + hlen;
        let mut next = |name: &str, like: &[usize]| -> Result<Tensor<f32>> {
            let (t, used) = gten::decode_prefix(&bytes[pos..])
                .map_err(|e| format_err(path, format!("{name}: {e}")))?;
            pos += used;
            if t.shape() != like {
                return Err(format_err(
                    path,
                    format!("{name}: shape {:?}, expected {like:?}", t.shape()),
                ));
            }
            Ok(t.into_tensor())
        };
        let shapes: Vec<Vec<usize>> = store
            .iter()
            .map(|(_, p)| p.value.shape().to_vec())
            .collect();
        for (i, p) in store.iter_mut().enumerate() {
            if header.tensors[i] != p.name {
                return Err(format_err(
                    path,
                    format!("expected {}, found {}", p.name, header.tensors[i]),
                ));
            }
            p.value = next(&p.name, &shapes[i])?;
        }
        let mut adam = AdamState::new(header.adam, &store);
        adam.step = header.adam_step;
        for (i, shape) in shapes.iter().enumerate() {
            adam.m[i] = next(&header.tensors[n + i], shape)?;
        }
        for (i, shape) in shapes.iter().enumerate() {
            adam.v[i] = next(&header.tensors[2 * n + i], shape)?;
        }
        if pos != bytes.len() {
            return Err(format_err(path, "trailing bytes"));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab,
            progress: header.progress,
            rng: header.rng,
            model,
            store,
            adam,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Short content hash identifying a checkpoint file.
pub fn checkpoint_id(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// `dir/checkpoints/epoch-NNNN.ckpt`
pub fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints")
        .join(format!("epoch-{epoch:04}.ckpt"))
}
