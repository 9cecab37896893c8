use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::transformer::TransformerModel;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{ParamShape, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MDMTCKPT";
const VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// System name, e.g. `combined-ints` or `single-dom-ft-DOM_REV`.
    pub system: String,
    pub regime: String,
    /// Domain of a single-domain fine-tune.
    pub domain: Option<String>,
    pub seed: u64,
    pub virtual_epochs: usize,
    pub steps: u64,
    /// Id of the checkpoint this one was fine-tuned from.
    pub parent: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_fingerprint: String,
    provenance: Provenance,
    params: Vec<ParamShape>,
}

/// A trained model with the vocabulary fingerprint it expects.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub vocab_fingerprint: String,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// Versioned container: magic, `u32` version, `u64` header length, JSON
    /// header, then every parameter as little-endian `f64` in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let header = Header {
            config: self.model.config().clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            provenance: self.provenance.clone(),
            params: params
                .iter()
                .map(|(_, p)| ParamShape {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in params.iter() {
            for x in p.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut blob = &body[hlen..];
        let mut store = ParamStore::new();
        for ps in &header.params {
            let n: usize = ps.shape.iter().product();
            if blob.len() < 8 * n {
                return Err(bad(&format!("truncated parameter `{}`", ps.name)));
            }
            let data = blob[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blob = &blob[8 * n..];
            store.add(ps.name.clone(), Tensor::new(ps.shape.clone(), data)?);
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            model: TransformerModel::from_params(header.config, store)?,
            vocab_fingerprint: header.vocab_fingerprint,
            provenance: header.provenance,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn id(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and refuses a checkpoint built for a different vocabulary.
    pub fn load_for(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_vocab(vocab)?;
        Ok(ck)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let actual = vocab.fingerprint();
        if actual != self.vocab_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.vocab_fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }
}

/// Write-temp-then-rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::format("path", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
