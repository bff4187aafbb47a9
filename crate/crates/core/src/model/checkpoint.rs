//! Checkpoint directory: `manifest.json`, `weights.bin` (little-endian f32
//! in manifest order) and `vocab.txt`.

use std::fs;
use std::path::Path;

use mvaema_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{CoreError, Result};
use crate::tokenization::Vocab;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub seed: u64,
}

pub fn save_checkpoint(dir: &Path, model: &Model<f32>, vocab: &Vocab, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut weights = Vec::with_capacity(model.params.numel() * 4);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| CoreError::io(&path, e))
    };
    write("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write("weights.bin", &weights)?;
    write("vocab.txt", vocab.to_text().as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| CoreError::io(&path, e))
    };
    let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let weights = read("weights.bin")?;
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if weights.len() != total * 4 {
        return Err(CoreError::Checkpoint(format!(
            "weights.bin holds {} bytes, manifest needs {}",
            weights.len(),
            total * 4
        )));
    }
    let mut params = ParamStore::new();
    let mut floats = weights
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for p in &manifest.params {
        let n = p.shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        params.insert(p.name.clone(), Tensor::new(&p.shape, data)?)?;
    }
    let vocab = Vocab::from_text(&String::from_utf8_lossy(&read("vocab.txt")?))?;
    if vocab.len() != manifest.config.vocab_size {
        return Err(CoreError::Checkpoint(format!(
            "vocab.txt has {} tokens, config expects {}",
            vocab.len(),
            manifest.config.vocab_size
        )));
    }
    let model = Model::from_params(manifest.config, params)?;
    Ok(Checkpoint {
        model,
        vocab,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let vocab = Vocab::build(&["a b c d e f g"], 1).unwrap();
        let mut cfg = ModelConfig::micro(vocab.len());
        cfg.num_patches = 4;
        cfg.patch_dim = 6;
        let model: Model<f32> = Model::init(cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &vocab, 9).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.seed, 9);
        assert_eq!(ck.vocab, vocab);
        for ((_, a), (_, b)) in ck.model.params.iter().zip(model.params.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_weights_rejected() {
        let vocab = Vocab::build(&["a b"], 1).unwrap();
        let mut cfg = ModelConfig::micro(vocab.len());
        cfg.num_patches = 4;
        cfg.patch_dim = 6;
        let model: Model<f32> = Model::init(cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &vocab, 0).unwrap();
        let w = dir.path().join("weights.bin");
        let mut bytes = fs::read(&w).unwrap();
        bytes.pop();
        fs::write(&w, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CoreError::Checkpoint(_))));
    }
}
