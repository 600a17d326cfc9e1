//! Checkpoint directories: one `PJXT` file per tensor plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answering::ANSWER_HEAD_LAYERS;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ManifestEntry, ParamSet};
use crate::training::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IQ_SOURCE: &str = "post-normalization, pre-dropout";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub answer_head_layers: usize,
    /// Which answering-model pooled map feeds the explainer.
    pub iq_source: String,
    pub train: Option<TrainConfig>,
    pub tensors: Vec<ManifestEntry>,
}

impl Manifest {
    /// Fails when the checkpoint was built against a different vocabulary.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::Config(format!(
                "checkpoint vocabulary {} does not match dataset vocabulary {}",
                self.vocab_hash, vocab_hash
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    params: &ParamSet,
    model: &ModelConfig,
    vocab_hash: &str,
    train: Option<&TrainConfig>,
) -> Result<Manifest> {
    let tensors = params.save_tensors(dir)?;
    let manifest = Manifest {
        kind: kind.to_string(),
        model: model.clone(),
        vocab_hash: vocab_hash.to_string(),
        answer_head_layers: ANSWER_HEAD_LAYERS,
        iq_source: IQ_SOURCE.to_string(),
        train: train.cloned(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, Manifest)> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if manifest.answer_head_layers != ANSWER_HEAD_LAYERS {
        return Err(Error::Config(format!(
            "checkpoint uses {} answer head layers, this build supports {ANSWER_HEAD_LAYERS}",
            manifest.answer_head_layers
        )));
    }
    let params = ParamSet::load_tensors(dir, &manifest.tensors)?;
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answering::init_answerer;
    use crate::config::TaskMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_with_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::desk(TaskMode::Vqa, 4, 10, 12);
        let mut p = init_answerer(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        p.set_frozen_prefix("ans.classifier", true);
        let m = save_checkpoint(dir.path(), "answerer", &p, &cfg, "abc", None).unwrap();
        let (back, m2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, p);
        assert_eq!(m, m2);
        assert_eq!(m2.iq_source, IQ_SOURCE);
        assert_eq!(m2.answer_head_layers, 1);
        assert!(m2.check_vocab("abc").is_ok());
        let err = m2.check_vocab("def").unwrap_err().to_string();
        assert!(err.contains("abc") && err.contains("def"));
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let cfg = ModelConfig::desk(TaskMode::Act, 4, 0, 12);
        let p = init_answerer(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_checkpoint(a.path(), "answerer", &p, &cfg, "h", None).unwrap();
        save_checkpoint(b.path(), "answerer", &p, &cfg, "h", None).unwrap();
        for entry in fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap()
            );
        }
    }
}
