//! Model dimensions and task mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// VQA (question-conditioned) or activity recognition (no question).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Vqa,
    Act,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqa" => Ok(TaskMode::Vqa),
            "act" => Ok(TaskMode::Act),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected vqa or act)"))),
        }
    }
}

/// Sizes of every layer in the answering and explanation models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: TaskMode,
    /// Channels `C` of the precomputed spatial features.
    pub feature_channels: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub question_vocab: usize,
    pub question_embed: usize,
    /// Hidden size `H` of the two-layer question encoder.
    pub question_hidden: usize,
    /// Common channel count of the image/question fusion.
    pub pool_dim: usize,
    pub attention_hidden: usize,
    /// `|Y|`.
    pub num_answers: usize,
    /// `d`.
    pub answer_embed: usize,
    pub pointing_hidden: usize,
    pub explanation_vocab: usize,
    pub word_embed: usize,
    pub decoder_hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size VQA configuration.
    pub fn full_vqa(question_vocab: usize, explanation_vocab: usize) -> Self {
        Self {
            mode: TaskMode::Vqa,
            feature_channels: 2048,
            grid_rows: 14,
            grid_cols: 14,
            question_vocab,
            question_embed: 300,
            question_hidden: 512,
            pool_dim: 2048,
            attention_hidden: 512,
            num_answers: 3000,
            answer_embed: 300,
            pointing_hidden: 512,
            explanation_vocab,
            word_embed: 300,
            decoder_hidden: 1024,
            max_len: 20,
            dropout: 0.3,
        }
    }

    /// Full-size activity-recognition configuration.
    pub fn full_act(explanation_vocab: usize) -> Self {
        Self {
            mode: TaskMode::Act,
            question_vocab: 0,
            num_answers: 397,
            ..Self::full_vqa(0, explanation_vocab)
        }
    }

    /// Desk-scale configuration used by tests and the synthetic corpus.
    pub fn desk(mode: TaskMode, num_answers: usize, question_vocab: usize, explanation_vocab: usize) -> Self {
        Self {
            mode,
            feature_channels: 16,
            grid_rows: 14,
            grid_cols: 14,
            question_vocab: if mode == TaskMode::Act { 0 } else { question_vocab },
            question_embed: 16,
            question_hidden: 32,
            pool_dim: 16,
            attention_hidden: 16,
            num_answers,
            answer_embed: 32,
            pointing_hidden: 16,
            explanation_vocab,
            word_embed: 16,
            decoder_hidden: 32,
            max_len: 12,
            dropout: 0.3,
        }
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        let mut sizes = vec![
            ("feature_channels", self.feature_channels),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("question_hidden", self.question_hidden),
            ("pool_dim", self.pool_dim),
            ("attention_hidden", self.attention_hidden),
            ("num_answers", self.num_answers),
            ("answer_embed", self.answer_embed),
            ("pointing_hidden", self.pointing_hidden),
            ("word_embed", self.word_embed),
            ("decoder_hidden", self.decoder_hidden),
            ("max_len", self.max_len),
        ];
        if self.mode == TaskMode::Vqa {
            sizes.push(("question_vocab", self.question_vocab));
            sizes.push(("question_embed", self.question_embed));
        }
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.explanation_vocab < 4 {
            return Err(Error::Config(
                "explanation_vocab must hold the three reserved ids and at least one word".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
