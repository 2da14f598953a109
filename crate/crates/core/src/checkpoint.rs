//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"OCTMCKPT" | u32 format version | u64 metadata length | metadata JSON
//! | f32 data of every array, in metadata order
//! ```
//!
//! The metadata carries the stage tag, progress counters, the config hash,
//! the domain order and the name and shape of every array.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use octmorph_autograd::{Adam, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OCTMCKPT";
const FORMAT_VERSION: u32 = 1;

pub const STAGE_STYLE_ENCODER: &str = "style_encoder_v1";
pub const STAGE_GENERATOR: &str = "generator_v1";
pub const STAGE_DISCRIMINATOR: &str = "discriminator_v1";
pub const STAGE_CLASSIFIER: &str = "toy_classifier_v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: u64,
    pub epoch: u64,
    pub config_hash: String,
    pub domains: Vec<String>,
    pub resolution: usize,
    /// Named RNG stream positions needed to continue exactly where the run
    /// stopped.
    pub rng_states: BTreeMap<String, u64>,
    /// Architecture and any other stage-specific settings.
    pub extra: serde_json::Value,
    #[serde(default)]
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamStore) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))
    }

    /// Overwrites every parameter of `params` with the array stored under
    /// `prefix + name`, checking shapes.
    pub fn load_params(&self, prefix: &str, params: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let stored = self.get(&format!("{prefix}{name}"))?;
            let slot = &mut params.tensors_mut()[i];
            if stored.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "array '{prefix}{name}' has shape {:?}, model expects {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        Ok(())
    }

    pub fn push_adam(&mut self, prefix: &str, params: &ParamStore, adam: &Adam) {
        let (steps, first, second) = adam.state();
        let steps: Vec<f32> = steps.iter().map(|&s| s as f32).collect();
        self.push(format!("{prefix}steps"), Tensor::new(&[steps.len()], steps));
        for (i, name) in params.names().iter().enumerate() {
            self.push(format!("{prefix}m.{name}"), first[i].clone());
            self.push(format!("{prefix}v.{name}"), second[i].clone());
        }
    }

    pub fn load_adam(&self, prefix: &str, params: &ParamStore, adam: &mut Adam) -> Result<()> {
        let steps = self
            .get(&format!("{prefix}steps"))?
            .data()
            .iter()
            .map(|&s| s as u64)
            .collect();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for name in params.names() {
            first.push(self.get(&format!("{prefix}m.{name}"))?.clone());
            second.push(self.get(&format!("{prefix}v.{name}"))?.clone());
        }
        adam.restore(steps, first, second);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        meta.arrays = self
            .arrays
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let meta_json = serde_json::to_vec(&meta).expect("metadata is always serializable");
        let payload: usize = self.arrays.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(20 + meta_json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not an octmorph checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta_end = 20usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..meta_end])
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut cursor = meta_end;
        let mut arrays = Vec::with_capacity(meta.arrays.len());
        for entry in &meta.arrays {
            let n: usize = entry.shape.iter().product();
            let end = cursor + n * 4;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated array '{}'", entry.name)));
            }
            let data = bytes[cursor..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((entry.name.clone(), Tensor::new(&entry.shape, data)));
            cursor = end;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_stage(&self, stage: &str) -> Result<()> {
        if self.meta.stage == stage {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a '{stage}' checkpoint, found '{}'",
                self.meta.stage
            )))
        }
    }
}

/// SHA-256 over the names, shapes and exact bits of a parameter set.
pub fn params_digest(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut meta = CheckpointMeta {
            stage: STAGE_GENERATOR.into(),
            step: 7,
            domains: vec!["normal".into(), "bump".into()],
            ..Default::default()
        };
        meta.rng_states.insert("seed".into(), 3);
        let mut ck = Checkpoint::new(meta);
        ck.push("a", Tensor::new(&[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0]));
        ck.push("b", Tensor::scalar(4.0));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.arrays, ck.arrays);
        assert_eq!(back.meta.step, 7);
        assert_eq!(back.meta.domains, ck.meta.domains);
        back.expect_stage(STAGE_GENERATOR).unwrap();
        assert!(back.expect_stage(STAGE_DISCRIMINATOR).is_err());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        let mut ck = Checkpoint::new(CheckpointMeta::default());
        ck.push("a", Tensor::zeros(&[4]));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn digest_sees_single_bit_changes() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::new(&[2], vec![1.0, 2.0]));
        let before = params_digest(&p);
        let v = p.get_mut(id).data_mut();
        v[1] = f32::from_bits(v[1].to_bits() ^ 1);
        assert_ne!(before, params_digest(&p));
    }
}
