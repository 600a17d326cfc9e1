//! Run configuration: JSON file, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use pjx_core::dataset::{Split, SynthConfig, VocabOptions};
use pjx_core::{Conditioning, ModelConfig, TaskMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    /// Defaults to `<dataset>/features`.
    pub features: Option<PathBuf>,
    /// Defaults to `<dataset>/vocab.json`.
    pub vocab: Option<PathBuf>,
    /// Answering-model checkpoint consumed by `train-explainer`.
    pub answerer: Option<PathBuf>,
    /// Explainer checkpoint consumed by `explain`.
    pub checkpoint: Option<PathBuf>,
    /// `explanations.jsonl` written by `explain`.
    pub predictions: Option<PathBuf>,
    /// Stand-alone text corpus for `eval-text`.
    pub corpus: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricToggles {
    pub bleu4: bool,
    pub rouge_l: bool,
    pub cider: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        MetricToggles {
            bleu4: true,
            rouge_l: true,
            cider: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Uniform,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TaskMode,
    pub seed: u64,
    pub paths: Paths,
    pub split: Split,
    pub train: TrainConfig,
    /// Layer sizes; inferred from the data when absent.
    pub model: Option<ModelConfig>,
    pub conditioning: Conditioning,
    pub beam_width: usize,
    /// Truncates question token sequences (question mode only).
    pub question_max_tokens: Option<usize>,
    pub metrics: MetricToggles,
    pub vocab: VocabOptions,
    pub synth: SynthConfig,
    pub baseline: Option<Baseline>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: TaskMode::Vqa,
            seed: 0,
            paths: Paths::default(),
            split: Split::Train,
            train: TrainConfig::default(),
            model: None,
            conditioning: Conditioning::Gt,
            beam_width: 1,
            question_max_tokens: None,
            metrics: MetricToggles::default(),
            vocab: VocabOptions::default(),
            synth: SynthConfig::default(),
            baseline: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    /// Propagates shared settings into nested sections and validates.
    pub fn resolve(mut self) -> CliResult<Self> {
        self.train.seed = self.seed;
        self.train.conditioning = self.conditioning;
        self.synth.mode = self.mode;
        if let Some(m) = &mut self.model {
            m.mode = self.mode;
        }
        if self.mode == TaskMode::Act && self.question_max_tokens.is_some() {
            return Err(CliError::Validation(
                "question_max_tokens is a question option and is not allowed in act mode".into(),
            ));
        }
        if self.beam_width == 0 {
            return Err(CliError::Validation("beam_width must be at least 1".into()));
        }
        self.train.validate()?;
        self.synth.validate()?;
        if let Some(m) = &self.model {
            m.validate()?;
        }
        Ok(self)
    }

    pub fn require(&self, value: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
        value
            .clone()
            .ok_or_else(|| CliError::Validation(format!("missing required path `{name}`")))
    }

    pub fn output(&self) -> CliResult<PathBuf> {
        self.require(&self.paths.output, "output")
    }

    /// Writes this configuration next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
    }
}

/// Fails unless `path` is an existing directory.
pub fn existing_dir(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_dir() {
        return Err(CliError::Validation(format!(
            "{what} directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

pub fn existing_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_file() {
        return Err(CliError::Validation(format!(
            "{what} file {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("creating {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 16);
    }

    #[test]
    fn unknown_keys_and_act_questions_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
        let c = RunConfig {
            mode: TaskMode::Act,
            question_max_tokens: Some(5),
            ..Default::default()
        };
        assert!(matches!(c.resolve(), Err(CliError::Validation(_))));
    }

    #[test]
    fn resolve_propagates_seed() {
        let c = RunConfig {
            seed: 9,
            conditioning: Conditioning::Pred,
            mode: TaskMode::Act,
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.conditioning, Conditioning::Pred);
        assert_eq!(c.synth.mode, TaskMode::Act);
    }
}
