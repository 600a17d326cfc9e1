//! Answering model: question encoder, image-question fusion, latent answer
//! attention, and answer classification.
//!
//! Fusion everywhere is an elementwise product followed by signed square
//! root, L2 normalization per location, and dropout. The classifier head
//! reuses that scheme on the attended feature and the question encoding,
//! then applies a single linear layer to `|Y|` logits.

use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, TaskMode};
use crate::error::{Error, Result};
use crate::graph::{NormGroup, Var};
use crate::lstm::{init_lstm, lstm_step, zero_state};
use crate::params::{ParamSet, Session};
use crate::tensor::Tensor;

/// Linear layers between the fused answer representation and the logits.
pub const ANSWER_HEAD_LAYERS: usize = 1;

/// `C x N x M` precomputed image features.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatures {
    tensor: Tensor,
    source: String,
}

impl SpatialFeatures {
    pub fn new(tensor: Tensor, source: impl Into<String>) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::Rank {
                expected: 3,
                actual: tensor.rank(),
            });
        }
        if !tensor.is_finite() {
            return Err(Error::InvalidTensor("features contain non-finite values".into()));
        }
        Ok(Self {
            tensor,
            source: source.into(),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }

    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let want = [cfg.feature_channels, cfg.grid_rows, cfg.grid_cols];
        if self.tensor.shape() != want {
            return Err(Error::shape("features vs config", self.tensor.shape(), &want));
        }
        Ok(())
    }
}

pub fn init_answerer(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let (c, h, cp) = (cfg.feature_channels, cfg.question_hidden, cfg.pool_dim);
    if cfg.mode == TaskMode::Vqa {
        p.insert_xavier("ans.q_embed", &[cfg.question_vocab, cfg.question_embed], rng);
        init_lstm(&mut p, "ans.q_lstm0", cfg.question_embed, h, rng);
        init_lstm(&mut p, "ans.q_lstm1", h, h, rng);
    }
    let mut layer = |name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng| {
        p.insert_xavier(format!("ans.{name}.w"), &[out, inp], rng);
        p.insert_zeros(format!("ans.{name}.b"), &[out]);
    };
    layer("img_proj", cp, c, rng);
    layer("q_proj", cp, h, rng);
    layer("att1", cfg.attention_hidden, cp, rng);
    layer("att2", 1, cfg.attention_hidden, rng);
    layer("head_img", cp, c, rng);
    layer("head_q", cp, h, rng);
    layer("classifier", cfg.num_answers, cp, rng);
    p
}

/// Final top-layer hidden state of the two-layer question encoder.
pub fn encode_question(sess: &mut Session, cfg: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Contract("question must have at least one token".into()));
    }
    let table = sess.param("ans.q_embed")?;
    let vocab = sess.graph.shape(table)[0];
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::OutOfVocabulary { id: bad, size: vocab });
    }
    let mut lower = zero_state(sess, cfg.question_hidden);
    let mut upper = zero_state(sess, cfg.question_hidden);
    for &t in tokens {
        let x = sess.graph.row(table, t)?;
        lower = lstm_step(sess, "ans.q_lstm0", x, lower)?;
        upper = lstm_step(sess, "ans.q_lstm1", lower.h, upper)?;
    }
    Ok(upper.h)
}

/// The all-ones question encoding used when there is no question.
pub fn ones_question(hidden: usize) -> Result<Tensor> {
    if hidden == 0 {
        return Err(Error::Contract("question encoding size must be positive".into()));
    }
    Ok(Tensor::ones(&[hidden]))
}

/// Question encoding for the configured mode. In ACT mode any tokens are ignored.
pub fn question_encoding(sess: &mut Session, cfg: &ModelConfig, tokens: Option<&[usize]>) -> Result<Var> {
    match cfg.mode {
        TaskMode::Act => Ok(sess.input("question_ones", ones_question(cfg.question_hidden)?)),
        TaskMode::Vqa => {
            let tokens = tokens.ok_or_else(|| Error::Contract("VQA mode needs a question".into()))?;
            encode_question(sess, cfg, tokens)
        }
    }
}

/// Image-question fusion. `normalized` is the pre-dropout map shared with the
/// explainer; `output` has dropout applied when training.
#[derive(Clone, Copy, Debug)]
pub struct PooledIq {
    pub normalized: Var,
    pub output: Var,
}

pub fn pool_iq(sess: &mut Session, features: Var, question: Var) -> Result<PooledIq> {
    let img = sess.linear(features, "ans.img_proj")?;
    let q = sess.linear(question, "ans.q_proj")?;
    let fused = sess.graph.mul(q, img)?;
    let s = sess.graph.signed_sqrt(fused);
    let normalized = sess.graph.l2_normalize(s, NormGroup::PerLocation);
    let output = sess.dropout(normalized)?;
    Ok(PooledIq { normalized, output })
}

/// 1x1 conv, ReLU, 1x1 conv to one channel, softmax over the grid.
pub fn answer_attention(sess: &mut Session, pooled: Var) -> Result<Var> {
    let shape = sess.graph.shape(pooled).to_vec();
    if shape.len() != 3 {
        return Err(Error::Rank {
            expected: 3,
            actual: shape.len(),
        });
    }
    let hidden = sess.linear(pooled, "ans.att1")?;
    let hidden = sess.graph.relu(hidden);
    let logits = sess.linear(hidden, "ans.att2")?;
    let logits = sess.graph.reshape(logits, vec![shape[1], shape[2]])?;
    Ok(sess.graph.softmax(logits))
}

pub fn predict_answer(sess: &mut Session, attended: Var, question: Var) -> Result<Var> {
    let a = sess.linear(attended, "ans.head_img")?;
    let q = sess.linear(question, "ans.head_q")?;
    let fused = sess.graph.mul(a, q)?;
    let s = sess.graph.signed_sqrt(fused);
    let n = sess.graph.l2_normalize(s, NormGroup::Whole);
    let d = sess.dropout(n)?;
    sess.linear(d, "ans.classifier")
}

#[derive(Clone, Copy, Debug)]
pub struct AnswerOutput {
    pub question: Var,
    pub pooled: PooledIq,
    pub attention: Var,
    pub attended: Var,
    pub logits: Var,
}

pub fn forward(
    sess: &mut Session,
    cfg: &ModelConfig,
    features: Var,
    question: Option<&[usize]>,
) -> Result<AnswerOutput> {
    let q = question_encoding(sess, cfg, question)?;
    let pooled = pool_iq(sess, features, q)?;
    let attention = answer_attention(sess, pooled.output)?;
    let attended = sess.graph.attend(features, attention)?;
    let logits = predict_answer(sess, attended, q)?;
    Ok(AnswerOutput {
        question: q,
        pooled,
        attention,
        attended,
        logits,
    })
}
