//! Checkpoint files.
//!
//! Layout: magic `GMCK`, `u32` format version, `u64` header length, JSON
//! header, then every parameter section as little-endian `f64` in layout
//! order. The header records the payload hash and, for pipeline outputs,
//! the stage that produced it and the hash of the parent checkpoint file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layout, ModelConfig, ParamVector, SectionSpec};
use crate::seed::sha256_hex;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    /// File name of the checkpoint this one was trained from, next to it on disk.
    pub parent_file: Option<String>,
    /// SHA-256 of the parent checkpoint file.
    pub parent_hash: Option<String>,
    /// SHA-256 of the canonical JSON of the run configuration.
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    sections: Vec<SectionSpec>,
    seed: u64,
    step: u64,
    dtype: String,
    payload_sha256: String,
    provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamVector,
    pub seed: u64,
    pub step: u64,
    pub provenance: Option<Provenance>,
}

impl Checkpoint {
    /// Fresh seeded initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamVector::init(&config, seed)?;
        Ok(Checkpoint { config, params, seed, step: 0, provenance: None })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.params.len() * 8);
        for &x in self.params.flatten() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        let header = Header {
            config: self.config.clone(),
            sections: self.params.sections().to_vec(),
            seed: self.seed,
            step: self.step,
            dtype: "f64".into(),
            payload_sha256: sha256_hex(&payload),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("checkpoint header truncated"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        if header.dtype != "f64" {
            return Err(Error::format(format!("unsupported dtype {}", header.dtype)));
        }
        header.config.validate()?;
        if header.sections != layout(&header.config) {
            return Err(Error::format("checkpoint sections do not match the model layout"));
        }
        let payload = &bytes[header_end..];
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(Error::format("checkpoint payload hash mismatch"));
        }
        if !payload.len().is_multiple_of(8) {
            return Err(Error::format("checkpoint payload is not a whole number of f64 values"));
        }
        let data: Vec<f64> =
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let params = ParamVector::from_sections(header.sections, data).map_err(|e| Error::format(e.to_string()))?;
        Ok(Checkpoint {
            config: header.config,
            params,
            seed: header.seed,
            step: header.step,
            provenance: header.provenance,
        })
    }

    /// Writes the file and returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads `path` and checks every ancestor recorded in the provenance
    /// chain against its stored hash. Returns the chain, newest first.
    pub fn load_verified(path: &Path) -> Result<Vec<Checkpoint>> {
        let mut chain = vec![Self::load(path)?];
        let dir = path.parent().unwrap_or(Path::new("."));
        loop {
            let prov = chain.last().and_then(|c| c.provenance.clone());
            let Some(Provenance { parent_file: Some(file), parent_hash: Some(hash), .. }) = prov else {
                break;
            };
            if chain.len() > 64 {
                return Err(Error::format("checkpoint provenance chain too long"));
            }
            let parent_path = dir.join(&file);
            let bytes = fs::read(&parent_path)?;
            if sha256_hex(&bytes) != hash {
                return Err(Error::format(format!("parent checkpoint {file} does not match recorded hash")));
            }
            chain.push(Self::from_bytes(&bytes)?);
        }
        Ok(chain)
    }
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
