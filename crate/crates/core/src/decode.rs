//! Greedy and beam-search justification decoding.
//!
//! Step scores are log-softmax values over the whole explanation vocabulary.
//! The begin-of-sequence id is never emitted. Ties go to the lowest id, which
//! makes a width-1 beam search reproduce greedy decoding exactly.

use std::cmp::Ordering;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::explainer::{self, decoder_step, initial_state, AnswerSource, JustificationTokens};
use crate::graph::{log_softmax, Var};
use crate::lstm::LstmState;
use crate::map::AttentionMap;
use crate::params::{ParamSet, Session};
use crate::tensor::Tensor;
use crate::training::{argmax, FEATURES_INPUT};
use crate::vocab::{BOS, EOS};

/// A decoded justification and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: JustificationTokens,
    /// Sum of per-step log-probabilities, including the end-of-sequence step.
    pub log_prob: f64,
    /// Decoder steps taken; equals `tokens.len() + 1` when terminated.
    pub steps: usize,
    pub terminated: bool,
}

impl Hypothesis {
    /// Log-probability per decoder step.
    pub fn normalized(&self) -> f64 {
        self.log_prob / self.steps as f64
    }
}

fn step_scores(sess: &mut Session, context: Var, prev: usize, state: LstmState) -> Result<(Vec<f64>, LstmState)> {
    let (logits, next) = decoder_step(sess, context, prev, state)?;
    Ok((log_softmax(sess.graph.value(logits).data()), next))
}

fn finish(words: Vec<usize>, vocab: usize, log_prob: f64, terminated: bool) -> Result<Hypothesis> {
    let steps = words.len() + usize::from(terminated);
    Ok(Hypothesis {
        tokens: JustificationTokens::new(words, vocab)?,
        log_prob,
        steps,
        terminated,
    })
}

fn check_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Feeds back the most likely word until end-of-sequence or `max_len` steps.
pub fn decode_greedy(sess: &mut Session, cfg: &ModelConfig, context: Var, max_len: usize) -> Result<Hypothesis> {
    check_len(max_len)?;
    let mut state = initial_state(sess, cfg);
    let mut prev = BOS;
    let mut words = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let (lp, next) = step_scores(sess, context, prev, state)?;
        let mut best = EOS;
        for k in BOS + 1..lp.len() {
            if lp[k] > lp[best] {
                best = k;
            }
        }
        log_prob += lp[best];
        if best == EOS {
            return finish(words, lp.len(), log_prob, true);
        }
        words.push(best);
        prev = best;
        state = next;
    }
    finish(words, cfg.explanation_vocab, log_prob, false)
}

struct Beam {
    words: Vec<usize>,
    log_prob: f64,
    state: LstmState,
}

/// Length-normalized beam search. The greedy hypothesis is always among the
/// finalists, so the result never scores below greedy decoding.
pub fn decode_beam(
    sess: &mut Session,
    cfg: &ModelConfig,
    context: Var,
    beam_width: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam_width == 0 {
        return Err(Error::Contract("beam_width must be at least 1".into()));
    }
    check_len(max_len)?;
    let vocab = cfg.explanation_vocab;
    let mut active = vec![Beam {
        words: Vec::new(),
        log_prob: 0.0,
        state: initial_state(sess, cfg),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize, LstmState)> = Vec::new();
        for (b, beam) in active.iter().enumerate() {
            let prev = beam.words.last().copied().unwrap_or(BOS);
            let (lp, next) = step_scores(sess, context, prev, beam.state)?;
            for (k, &s) in lp.iter().enumerate().skip(BOS + 1) {
                candidates.push((beam.log_prob + s, b, k, next));
            }
        }
        candidates.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        let mut next_active = Vec::new();
        for (log_prob, b, k, state) in candidates.into_iter().take(beam_width) {
            let mut words = active[b].words.clone();
            if k == EOS {
                finished.push(finish(words, vocab, log_prob, true)?);
            } else {
                words.push(k);
                next_active.push(Beam { words, log_prob, state });
            }
        }
        active = next_active;
        if active.is_empty() {
            break;
        }
    }
    for beam in active {
        finished.push(finish(beam.words, vocab, beam.log_prob, false)?);
    }
    if beam_width > 1 {
        finished.push(decode_greedy(sess, cfg, context, max_len)?);
    }
    let mut best = finished.swap_remove(0);
    for h in finished {
        if h.normalized() > best.normalized() {
            best = h;
        }
    }
    Ok(best)
}

/// Score of a given word sequence under the decoder, optionally terminated.
pub fn sequence_log_prob(
    sess: &mut Session,
    cfg: &ModelConfig,
    context: Var,
    words: &[usize],
    terminated: bool,
) -> Result<f64> {
    let mut state = initial_state(sess, cfg);
    let mut prev = BOS;
    let mut total = 0.0;
    let mut targets = words.to_vec();
    if terminated {
        targets.push(EOS);
    }
    for t in targets {
        let (lp, next) = step_scores(sess, context, prev, state)?;
        total += lp
            .get(t)
            .copied()
            .ok_or(Error::OutOfVocabulary { id: t, size: lp.len() })?;
        prev = t;
        state = next;
    }
    Ok(total)
}

/// Everything the full model produces for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub predicted_answer: usize,
    pub answer_attention: AttentionMap,
    pub pointing: AttentionMap,
    pub justification: Hypothesis,
}

/// Evaluation-mode forward pass plus decoding; width 1 is greedy.
pub fn explain(
    params: &ParamSet,
    cfg: &ModelConfig,
    features: &Tensor,
    question: Option<&[usize]>,
    source: AnswerSource,
    beam_width: usize,
) -> Result<Explanation> {
    let mut sess = Session::eval(params);
    let f = sess.input(FEATURES_INPUT, features.clone());
    let out = explainer::forward(&mut sess, cfg, f, question, source)?;
    let justification = if beam_width == 1 {
        decode_greedy(&mut sess, cfg, out.context, cfg.max_len)?
    } else {
        decode_beam(&mut sess, cfg, out.context, beam_width, cfg.max_len)?
    };
    let g = &sess.graph;
    Ok(Explanation {
        predicted_answer: argmax(g.value(out.answer.logits).data()),
        answer_attention: AttentionMap::from_tensor(g.value(out.answer.attention))?,
        pointing: AttentionMap::from_tensor(g.value(out.pointing))?,
        justification,
    })
}
