//! Multimodal explanation model: answer embedding, answer-conditioned
//! pointing, explanation context, and the justification decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answering::{self, AnswerOutput};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{NormGroup, Var};
use crate::lstm::{init_lstm, lstm_step, zero_state, LstmState};
use crate::params::{ParamSet, Session};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

/// Word ids of a justification. The end-of-sequence id is implicit and is
/// appended by [`JustificationTokens::targets`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JustificationTokens {
    words: Vec<usize>,
}

impl JustificationTokens {
    pub fn new(words: Vec<usize>, vocab_size: usize) -> Result<Self> {
        for &w in &words {
            if w >= vocab_size {
                return Err(Error::OutOfVocabulary {
                    id: w,
                    size: vocab_size,
                });
            }
            if w == BOS || w == EOS {
                return Err(Error::Contract(format!("reserved id {w} inside a justification")));
            }
        }
        Ok(Self { words })
    }

    pub fn words(&self) -> &[usize] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words followed by the end-of-sequence id.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = self.words.clone();
        t.push(EOS);
        t
    }
}

/// Where the answer fed to the explainer comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// One-hot of the ground-truth answer.
    #[default]
    Gt,
    /// Softmax of the answering model's logits.
    Pred,
}

impl std::str::FromStr for Conditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Self::Gt),
            "pred" => Ok(Self::Pred),
            other => Err(Error::Config(format!(
                "unknown conditioning `{other}` (expected gt or pred)"
            ))),
        }
    }
}

/// The answer vector for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnswerSource {
    OneHot(usize),
    Predicted,
}

impl AnswerSource {
    pub fn from_conditioning(c: Conditioning, ground_truth: usize) -> Self {
        match c {
            Conditioning::Gt => Self::OneHot(ground_truth),
            Conditioning::Pred => Self::Predicted,
        }
    }
}

pub fn init_explainer(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let d = cfg.answer_embed;
    let layer = |p: &mut ParamSet, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng| {
        p.insert_xavier(format!("expl.{name}.w"), &[out, inp], rng);
        p.insert_zeros(format!("expl.{name}.b"), &[out]);
    };
    layer(&mut p, "y_embed1", d, cfg.num_answers, rng);
    layer(&mut p, "y_embed2", d, d, rng);
    layer(&mut p, "iqa_proj", d, cfg.pool_dim, rng);
    layer(&mut p, "point1", cfg.pointing_hidden, d, rng);
    layer(&mut p, "point2", 1, cfg.pointing_hidden, rng);
    layer(&mut p, "att_proj", d, cfg.feature_channels, rng);
    layer(&mut p, "q_proj", d, cfg.question_hidden, rng);
    p.insert_xavier("expl.word_embed", &[cfg.explanation_vocab, cfg.word_embed], rng);
    init_lstm(&mut p, "expl.lstm", d + cfg.word_embed, cfg.decoder_hidden, rng);
    layer(&mut p, "pred", cfg.explanation_vocab, cfg.decoder_hidden, rng);
    p
}

/// `W6 tanh(W5 y + b5) + b6` for a one-hot or a distribution `y` of length `|Y|`.
pub fn embed_answer(sess: &mut Session, y: Var) -> Result<Var> {
    let w5 = sess.param("expl.y_embed1.w")?;
    let want = sess.graph.shape(w5)[1];
    let got = sess.graph.shape(y).to_vec();
    if got != [want] {
        return Err(Error::shape("answer vector", &got, &[want]));
    }
    let h = sess.linear(y, "expl.y_embed1")?;
    let h = sess.graph.tanh(h);
    sess.linear(h, "expl.y_embed2")
}

/// Answer vector node: a fixed one-hot input, or the softmax of `logits`.
pub fn answer_vector(sess: &mut Session, logits: Var, source: AnswerSource) -> Result<Var> {
    match source {
        AnswerSource::OneHot(k) => {
            let n = sess.graph.shape(logits)[0];
            let t = Tensor::one_hot(n, k)?;
            Ok(sess.input("answer_one_hot", t))
        }
        AnswerSource::Predicted => Ok(sess.graph.softmax(logits)),
    }
}

/// `L2(signed_sqrt((W7 f_iq + b7) * e))` at each location, then dropout.
pub fn pool_iqa(sess: &mut Session, pooled_iq: Var, embedding: Var) -> Result<Var> {
    let proj = sess.linear(pooled_iq, "expl.iqa_proj")?;
    let fused = sess.graph.mul(embedding, proj)?;
    let s = sess.graph.signed_sqrt(fused);
    let n = sess.graph.l2_normalize(s, NormGroup::PerLocation);
    sess.dropout(n)
}

/// `softmax(W9 relu(W8 f_iqa + b8) + b9)` over the grid.
pub fn pointing_attention(sess: &mut Session, iqa: Var) -> Result<Var> {
    let shape = sess.graph.shape(iqa).to_vec();
    if shape.len() != 3 {
        return Err(Error::Rank {
            expected: 3,
            actual: shape.len(),
        });
    }
    let h = sess.linear(iqa, "expl.point1")?;
    let h = sess.graph.relu(h);
    let logits = sess.linear(h, "expl.point2")?;
    let logits = sess.graph.reshape(logits, vec![shape[1], shape[2]])?;
    Ok(sess.graph.softmax(logits))
}

/// `(W10 sum(alpha f) + b10) * (W11 q + b11) * e`.
pub fn explanation_context(
    sess: &mut Session,
    features: Var,
    alpha: Var,
    question: Var,
    embedding: Var,
) -> Result<Var> {
    let attended = sess.graph.attend(features, alpha)?;
    let v = sess.linear(attended, "expl.att_proj")?;
    let q = sess.linear(question, "expl.q_proj")?;
    let vq = sess.graph.mul(v, q)?;
    sess.graph.mul(vq, embedding)
}

/// One decoder step: LSTM on `concat(f_x, embed(prev))`, then `W_pred h + b_pred`.
pub fn decoder_step(sess: &mut Session, context: Var, prev: usize, state: LstmState) -> Result<(Var, LstmState)> {
    let table = sess.param("expl.word_embed")?;
    let vocab = sess.graph.shape(table)[0];
    if prev >= vocab {
        return Err(Error::OutOfVocabulary { id: prev, size: vocab });
    }
    let word = sess.graph.row(table, prev)?;
    let x = sess.graph.concat(&[context, word])?;
    let state = lstm_step(sess, "expl.lstm", x, state)?;
    let logits = sess.linear(state.h, "expl.pred")?;
    Ok((logits, state))
}

pub fn initial_state(sess: &mut Session, cfg: &ModelConfig) -> LstmState {
    zero_state(sess, cfg.decoder_hidden)
}

/// Logits for every target position, feeding the ground-truth previous word.
pub fn decode_teacher_forced(
    sess: &mut Session,
    cfg: &ModelConfig,
    context: Var,
    gt: &JustificationTokens,
) -> Result<Vec<Var>> {
    let mut state = initial_state(sess, cfg);
    let mut prev = BOS;
    let mut out = Vec::with_capacity(gt.len() + 1);
    for target in gt.targets() {
        let (logits, next) = decoder_step(sess, context, prev, state)?;
        out.push(logits);
        state = next;
        prev = target;
    }
    Ok(out)
}

/// All intermediate nodes of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ExplainOutput {
    pub answer: AnswerOutput,
    pub answer_vector: Var,
    pub embedding: Var,
    pub multimodal: Var,
    pub pointing: Var,
    pub context: Var,
}

/// Answering model followed by the explainer, up to the decoder context.
pub fn forward(
    sess: &mut Session,
    cfg: &ModelConfig,
    features: Var,
    question: Option<&[usize]>,
    source: AnswerSource,
) -> Result<ExplainOutput> {
    let answer = answering::forward(sess, cfg, features, question)?;
    let y = answer_vector(sess, answer.logits, source)?;
    let embedding = embed_answer(sess, y)?;
    let multimodal = pool_iqa(sess, answer.pooled.normalized, embedding)?;
    let pointing = pointing_attention(sess, multimodal)?;
    let context = explanation_context(sess, features, pointing, answer.question, embedding)?;
    Ok(ExplainOutput {
        answer,
        answer_vector: y,
        embedding,
        multimodal,
        pointing,
        context,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answering::init_answerer;
    use crate::config::TaskMode;
    use crate::gradcheck::{check_param_gradients, DEFAULT_STEP};
    use crate::map::{AttentionMap, MASS_TOLERANCE};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    pub(crate) fn small() -> ModelConfig {
        ModelConfig {
            feature_channels: 4,
            grid_rows: 3,
            grid_cols: 2,
            question_embed: 3,
            question_hidden: 5,
            pool_dim: 4,
            attention_hidden: 3,
            answer_embed: 4,
            pointing_hidden: 3,
            word_embed: 3,
            decoder_hidden: 4,
            ..ModelConfig::desk(TaskMode::Vqa, 3, 6, 7)
        }
    }

    fn model(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut p = init_answerer(cfg, &mut rng(seed));
        p.extend(init_explainer(cfg, &mut rng(seed + 1000)));
        randomize_biases(&mut p, seed + 2000);
        p
    }

    /// Every tensor drawn from U(-0.8, 0.8), keeping gradients far above round-off.
    fn dense_model(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut p = model(cfg, seed);
        let names: Vec<String> = p.names().map(String::from).collect();
        for (i, n) in names.iter().enumerate() {
            let shape = p.tensor(n).unwrap().shape().to_vec();
            p.set(n, random_tensor(&shape, seed * 1000 + i as u64).map(|v| 0.5 * v))
                .unwrap();
        }
        p
    }

    fn randomize_biases(p: &mut ParamSet, seed: u64) {
        let mut r = rng(seed);
        let names: Vec<String> = p.names().filter(|n| n.ends_with(".b")).map(String::from).collect();
        for n in names {
            let shape = p.tensor(&n).unwrap().shape().to_vec();
            let k = shape.iter().product();
            p.set(
                &n,
                Tensor::new(shape, (0..k).map(|_| r.gen_range(-0.5..0.5)).collect()).unwrap(),
            )
            .unwrap();
        }
    }

    #[test]
    fn zero_first_layer_embeds_to_bias() {
        let mut p = ParamSet::new();
        p.insert_zeros("expl.y_embed1.w", &[3, 4]);
        p.insert_zeros("expl.y_embed1.b", &[3]);
        p.insert("expl.y_embed2.w", random_tensor(&[2, 3], 1));
        p.insert("expl.y_embed2.b", Tensor::vector(vec![0.25, -0.5]));
        for k in 0..4 {
            let mut s = Session::eval(&p);
            let y = s.input("y", Tensor::one_hot(4, k).unwrap());
            let e = embed_answer(&mut s, y).unwrap();
            assert_eq!(s.graph.value(e).data(), &[0.25, -0.5]);
        }
    }

    #[test]
    fn one_hot_selects_tanh_column() {
        let w5 = random_tensor(&[3, 4], 2);
        let mut p = ParamSet::new();
        p.insert("expl.y_embed1.w", w5.clone());
        p.insert_zeros("expl.y_embed1.b", &[3]);
        p.insert("expl.y_embed2.w", eye(3));
        p.insert_zeros("expl.y_embed2.b", &[3]);
        let mut s = Session::eval(&p);
        let y = s.input("y", Tensor::one_hot(4, 2).unwrap());
        let e = embed_answer(&mut s, y).unwrap();
        let want: Vec<f64> = (0..3).map(|r| w5.data()[r * 4 + 2].tanh()).collect();
        assert_eq!(s.graph.value(e).data(), want.as_slice());
    }

    #[test]
    fn embedding_length_mismatch() {
        let mut p = ParamSet::new();
        p.insert_zeros("expl.y_embed1.w", &[3, 4]);
        let mut s = Session::eval(&p);
        let y = s.input("y", Tensor::ones(&[5]));
        assert!(matches!(embed_answer(&mut s, y), Err(Error::Shape { .. })));
    }

    #[test]
    fn embedding_gradients() {
        let mut r = rng(3);
        let mut p = ParamSet::new();
        p.insert_xavier("expl.y_embed1.w", &[3, 4], &mut r);
        p.insert("expl.y_embed1.b", random_tensor(&[3], 4));
        p.insert_xavier("expl.y_embed2.w", &[2, 3], &mut r);
        p.insert("expl.y_embed2.b", random_tensor(&[2], 5));
        let readout = Tensor::vector(vec![0.7, -1.3]);
        let report = check_param_gradients(
            &p,
            |s| {
                let y = s.input("y", Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
                let e = embed_answer(s, y)?;
                let w = s.input("r", readout.clone());
                let m = s.graph.mul(e, w)?;
                Ok(s.graph.sum(m))
            },
            DEFAULT_STEP,
            |_| true,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn zero_embedding_annihilates_iqa_and_context() {
        let cfg = small();
        let p = model(&cfg, 1);
        let mut s = Session::eval(&p);
        let f = s.input("f", random_tensor(&[4, 3, 2], 2));
        let pooled = s.input("iq", random_tensor(&[4, 3, 2], 3));
        let e = s.input("e", Tensor::zeros(&[4]));
        let iqa = pool_iqa(&mut s, pooled, e).unwrap();
        assert!(s.graph.value(iqa).data().iter().all(|&v| v == 0.0));
        let alpha = pointing_attention(&mut s, iqa).unwrap();
        let q = s.input("q", random_tensor(&[5], 4));
        let fx = explanation_context(&mut s, f, alpha, q, e).unwrap();
        assert!(s.graph.value(fx).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_iqa_single_location() {
        let mut p = ParamSet::new();
        p.insert("expl.iqa_proj.w", eye(3));
        p.insert_zeros("expl.iqa_proj.b", &[3]);
        let v = vec![4.0, -9.0, 0.25];
        let mut s = Session::eval(&p);
        let x = s.input("x", Tensor::new(vec![3, 1, 1], v.clone()).unwrap());
        let e = s.input("e", Tensor::ones(&[3]));
        let out = pool_iqa(&mut s, x, e).unwrap();
        let ss: Vec<f64> = v.iter().map(|x: &f64| x.signum() * x.abs().sqrt()).collect();
        let n = ss.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in s.graph.value(out).data().iter().zip(ss.iter().map(|x| x / n)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn answer_changes_iqa() {
        let cfg = small();
        let p = model(&cfg, 5);
        let run = |k: usize| {
            let mut s = Session::eval(&p);
            let iq = s.input("iq", random_tensor(&[4, 3, 2], 6));
            let y = s.input("y", Tensor::one_hot(3, k).unwrap());
            let e = embed_answer(&mut s, y).unwrap();
            let out = pool_iqa(&mut s, iq, e).unwrap();
            s.graph.value(out).clone()
        };
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn zero_pointing_weights_are_uniform() {
        let mut p = ParamSet::new();
        p.insert_zeros("expl.point1.w", &[3, 4]);
        p.insert_zeros("expl.point1.b", &[3]);
        p.insert_zeros("expl.point2.w", &[1, 3]);
        p.insert("expl.point2.b", Tensor::vector(vec![0.4]));
        let mut s = Session::eval(&p);
        let x = s.input("x", random_tensor(&[4, 2, 5], 1));
        let a = pointing_attention(&mut s, x).unwrap();
        assert!(s.graph.value(a).data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn pointing_is_a_distribution_and_location_equivariant() {
        let cfg = small();
        for seed in 0..10 {
            let p = model(&cfg, seed);
            let x = random_tensor(&[4, 3, 2], seed + 50);
            let point = |t: Tensor| {
                let mut s = Session::eval(&p);
                let v = s.input("x", t);
                let a = pointing_attention(&mut s, v).unwrap();
                s.graph.value(a).clone()
            };
            let a = point(x.clone());
            AttentionMap::from_tensor(&a).unwrap().check(MASS_TOLERANCE).unwrap();
            // Reverse the 6 locations.
            let perm: Vec<usize> = (0..6).rev().collect();
            let mut px = x.clone();
            for c in 0..4 {
                for l in 0..6 {
                    px.data_mut()[c * 6 + l] = x.data()[c * 6 + perm[l]];
                }
            }
            let b = point(px);
            for l in 0..6 {
                assert!((b.data()[l] - a.data()[perm[l]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn one_hot_alpha_selects_feature_column() {
        let mut p = ParamSet::new();
        p.insert("expl.att_proj.w", random_tensor(&[3, 4], 1));
        p.insert("expl.att_proj.b", random_tensor(&[3], 2));
        p.insert_zeros("expl.q_proj.w", &[3, 2]);
        p.insert("expl.q_proj.b", Tensor::ones(&[3]));
        let feats = random_tensor(&[4, 2, 2], 3);
        let mut s = Session::eval(&p);
        let f = s.input("f", feats.clone());
        let a = s.input("a", AttentionMap::delta(2, 2, 0, 1).to_tensor());
        let q = s.input("q", Tensor::ones(&[2]));
        let e = s.input("e", Tensor::ones(&[3]));
        let fx = explanation_context(&mut s, f, a, q, e).unwrap();
        let col: Vec<f64> = (0..4).map(|c| feats.data()[c * 4 + 1]).collect();
        let colv = s.input("col", Tensor::vector(col));
        let direct = s.linear(colv, "expl.att_proj").unwrap();
        assert_eq!(s.graph.value(fx), s.graph.value(direct));
    }

    #[test]
    fn unnormalized_alpha_is_contract_error() {
        let mut p = ParamSet::new();
        p.insert_zeros("expl.att_proj.w", &[3, 4]);
        p.insert_zeros("expl.att_proj.b", &[3]);
        let mut s = Session::eval(&p);
        let f = s.input("f", Tensor::ones(&[4, 2, 2]));
        let a = s.input("a", Tensor::filled(&[2, 2], 0.3));
        let q = s.input("q", Tensor::ones(&[2]));
        let e = s.input("e", Tensor::ones(&[3]));
        assert!(matches!(
            explanation_context(&mut s, f, a, q, e),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn context_gradients_to_w10_w11() {
        let cfg = ModelConfig {
            grid_rows: 1,
            grid_cols: 2,
            ..small()
        };
        let p = model(&cfg, 8);
        let feats = random_tensor(&[4, 1, 2], 9);
        let readout = random_tensor(&[4], 10);
        let report = check_param_gradients(
            &p,
            |s| {
                let f = s.input("f", feats.clone());
                let out = forward(s, &cfg, f, Some(&[1, 3]), AnswerSource::OneHot(1))?;
                let r = s.input("r", readout.clone());
                let m = s.graph.mul(out.context, r)?;
                Ok(s.graph.sum(m))
            },
            DEFAULT_STEP,
            |n| n.starts_with("expl.att_proj") || n.starts_with("expl.q_proj"),
        )
        .unwrap();
        assert!(report.coordinates > 0);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_decoder_emits_bias() {
        let cfg = small();
        let mut p = init_explainer(&cfg, &mut rng(0));
        let names: Vec<String> = p.names().map(String::from).collect();
        for n in names {
            let shape = p.tensor(&n).unwrap().shape().to_vec();
            p.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let bias = random_tensor(&[7], 1);
        p.set("expl.pred.b", bias.clone()).unwrap();
        let mut s = Session::eval(&p);
        let fx = s.input("fx", random_tensor(&[4], 2));
        let gt = JustificationTokens::new(vec![3, 4, 5], 7).unwrap();
        let logits = decode_teacher_forced(&mut s, &cfg, fx, &gt).unwrap();
        assert_eq!(logits.len(), 4);
        for l in logits {
            assert_eq!(s.graph.value(l), &bias);
        }
    }

    #[test]
    fn teacher_forcing_is_causal() {
        let cfg = small();
        let p = model(&cfg, 3);
        let fx = random_tensor(&[4], 4);
        let run = |words: Vec<usize>| {
            let mut s = Session::eval(&p);
            let c = s.input("fx", fx.clone());
            let gt = JustificationTokens::new(words, 7).unwrap();
            let ls = decode_teacher_forced(&mut s, &cfg, c, &gt).unwrap();
            ls.iter().map(|&l| s.graph.value(l).clone()).collect::<Vec<_>>()
        };
        let a = run(vec![3, 4, 5, 6]);
        let b = run(vec![3, 4, 2, 3]);
        // Position t sees words < t; words from index 2 differ.
        for t in 0..=2 {
            assert_eq!(a[t], b[t]);
        }
        assert_ne!(a[3], b[3]);
    }

    #[test]
    fn teacher_forcing_rejects_out_of_vocab() {
        assert!(JustificationTokens::new(vec![3, 9], 7).is_err());
        assert!(JustificationTokens::new(vec![EOS], 7).is_err());
    }

    #[test]
    fn per_word_loss_gradient_five_word_vocab() {
        let cfg = ModelConfig {
            grid_rows: 1,
            grid_cols: 2,
            explanation_vocab: 5,
            ..small()
        };
        for seed in 0..5 {
            let p = dense_model(&cfg, 12 + seed);
            let feats = random_tensor(&[4, 1, 2], 13 + seed);
            let gt = JustificationTokens::new(vec![3, 4, 3], 5).unwrap();
            let report = check_param_gradients(
                &p,
                |s| {
                    let f = s.input("f", feats.clone());
                    let out = forward(s, &cfg, f, Some(&[2, 1]), AnswerSource::OneHot(0))?;
                    let logits = decode_teacher_forced(s, &cfg, out.context, &gt)?;
                    let mut losses = Vec::new();
                    for (l, t) in logits.iter().zip(gt.targets()) {
                        losses.push(s.graph.cross_entropy(*l, t)?);
                    }
                    s.graph.mean(&losses)
                },
                DEFAULT_STEP,
                |_| true,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn predicted_conditioning_gradient_reaches_answerer() {
        let cfg = ModelConfig {
            grid_rows: 1,
            grid_cols: 2,
            ..small()
        };
        let p = model(&cfg, 14);
        let feats = random_tensor(&[4, 1, 2], 15);
        let report = check_param_gradients(
            &p,
            |s| {
                let f = s.input("f", feats.clone());
                let out = forward(s, &cfg, f, Some(&[2]), AnswerSource::Predicted)?;
                Ok(s.graph.sum(out.context))
            },
            DEFAULT_STEP,
            |n| n.starts_with("ans.classifier") || n.starts_with("expl.y_embed"),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn answers_yield_distinct_pointing() {
        let cfg = small();
        for seed in 0..20 {
            let p = model(&cfg, seed);
            let feats = random_tensor(&[4, 3, 2], seed + 77);
            let point = |k: usize| {
                let mut s = Session::eval(&p);
                let f = s.input("f", feats.clone());
                let out = forward(&mut s, &cfg, f, Some(&[1, 2]), AnswerSource::OneHot(k)).unwrap();
                AttentionMap::from_tensor(s.graph.value(out.pointing)).unwrap()
            };
            assert!(point(0).l1_distance(&point(2)) > 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn conditioning_parses() {
        assert_eq!("pred".parse::<Conditioning>().unwrap(), Conditioning::Pred);
        assert!("x".parse::<Conditioning>().is_err());
    }
}
