//! Losses, Adam, and the two training phases.
//!
//! The answering model is trained on answer cross-entropy. The explainer is
//! trained on the per-word loss of teacher-forced justifications, with the
//! answering weights either frozen or finetuned. With `joint` set (the
//! activity-recognition protocol) the answer loss is added to the
//! explanation loss so both parts learn together.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answering;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::explainer::{self, decode_teacher_forced, AnswerSource, Conditioning, JustificationTokens};
use crate::graph::{Graph, Leaf, Var};
use crate::params::{ParamSet, Session};
use crate::tensor::Tensor;

/// Label of the feature input node in every training graph.
pub const FEATURES_INPUT: &str = "features";

/// One training instance with ids already resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor,
    pub question: Option<Vec<usize>>,
    pub answer: usize,
    pub justification: JustificationTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub freeze_answerer: bool,
    pub conditioning: Conditioning,
    /// Add the answer loss to the explanation loss.
    pub joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 200,
            seed: 0,
            dropout: 0.3,
            freeze_answerer: false,
            conditioning: Conditioning::Gt,
            joint: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ParamSet,
    pub log: Vec<EpochLog>,
}

/// `-log softmax(logits)[gt]`.
pub fn answer_loss(g: &mut Graph, logits: Var, gt: usize) -> Result<Var> {
    g.cross_entropy(logits, gt)
}

/// Mean over steps of the per-word cross-entropy, end-of-sequence included.
pub fn explanation_loss(g: &mut Graph, step_logits: &[Var], targets: &[usize]) -> Result<Var> {
    if step_logits.len() != targets.len() {
        return Err(Error::shape("explanation loss", &[step_logits.len()], &[targets.len()]));
    }
    let mut steps = Vec::with_capacity(targets.len());
    for (&l, &t) in step_logits.iter().zip(targets) {
        steps.push(g.cross_entropy(l, t)?);
    }
    g.mean(&steps)
}

/// Adam with bias correction; frozen tensors are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            if params.is_frozen(name) {
                continue;
            }
            let p = params.tensor_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn check_examples(cfg: &ModelConfig, examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let want = [cfg.feature_channels, cfg.grid_rows, cfg.grid_cols];
    for ex in examples {
        if ex.features.shape() != want {
            return Err(Error::Contract(format!(
                "record `{}`: features {:?} do not match config {:?}",
                ex.id,
                ex.features.shape(),
                want
            )));
        }
        if ex.answer >= cfg.num_answers {
            return Err(Error::Contract(format!(
                "record `{}`: answer id {} outside {} answers",
                ex.id, ex.answer, cfg.num_answers
            )));
        }
    }
    Ok(())
}

fn accumulate(total: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, params: &ParamSet) {
    for (name, g) in grads {
        if params.is_frozen(&name) {
            continue;
        }
        match total.get_mut(&name) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                total.insert(name, g);
            }
        }
    }
}

/// Shared minibatch loop. `build` returns the loss of one example.
fn run_epochs<F, A>(
    params: &mut ParamSet,
    tc: &TrainConfig,
    examples: &[Example],
    build: F,
    accuracy: A,
) -> Result<Vec<EpochLog>>
where
    F: Fn(&mut Session, &Example) -> Result<Var>,
    A: Fn(&ParamSet) -> Result<f64>,
{
    tc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(tc.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
            for &i in batch {
                let mut sess = Session::train(params, rng.gen(), tc.dropout);
                let loss = build(&mut sess, &examples[i])?;
                let value = sess.graph.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Contract(format!(
                        "non-finite loss on record `{}` in epoch {epoch}",
                        examples[i].id
                    )));
                }
                epoch_loss += value;
                let grads = sess.param_grads(loss)?;
                accumulate(&mut total, grads, params);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in total.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            adam.step(params, &total)?;
        }
        log.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: epoch_loss / examples.len() as f64,
            accuracy: accuracy(params)?,
        });
    }
    Ok(log)
}

/// Pretrains the answering model. `init` replaces the seeded initialization.
pub fn train_answerer(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    examples: &[Example],
    init: Option<ParamSet>,
) -> Result<Trained> {
    cfg.validate()?;
    check_examples(cfg, examples)?;
    let mut params = init.unwrap_or_else(|| answering::init_answerer(cfg, &mut ChaCha8Rng::seed_from_u64(tc.seed)));
    let log = run_epochs(
        &mut params,
        tc,
        examples,
        |sess, ex| {
            let f = sess.input(FEATURES_INPUT, ex.features.clone());
            let out = answering::forward(sess, cfg, f, ex.question.as_deref())?;
            answer_loss(&mut sess.graph, out.logits, ex.answer)
        },
        |p| answer_accuracy(cfg, p, examples),
    )?;
    Ok(Trained { params, log })
}

/// Loss of one example for explainer training.
pub fn explainer_example_loss(sess: &mut Session, cfg: &ModelConfig, tc: &TrainConfig, ex: &Example) -> Result<Var> {
    let f = sess.input(FEATURES_INPUT, ex.features.clone());
    let source = AnswerSource::from_conditioning(tc.conditioning, ex.answer);
    let out = explainer::forward(sess, cfg, f, ex.question.as_deref(), source)?;
    let logits = decode_teacher_forced(sess, cfg, out.context, &ex.justification)?;
    let loss = explanation_loss(&mut sess.graph, &logits, &ex.justification.targets())?;
    if tc.joint && !tc.freeze_answerer {
        let a = answer_loss(&mut sess.graph, out.answer.logits, ex.answer)?;
        return sess.graph.add(loss, a);
    }
    Ok(loss)
}

/// Trains the explainer on top of `answer_params`, which are frozen when
/// `freeze_answerer` is set.
pub fn train_explainer(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    examples: &[Example],
    answer_params: &ParamSet,
) -> Result<Trained> {
    cfg.validate()?;
    check_examples(cfg, examples)?;
    let mut params = answer_params.with_prefix("ans.");
    if params.is_empty() {
        return Err(Error::Contract("answering parameters are missing".into()));
    }
    params.set_frozen_prefix("ans.", tc.freeze_answerer);
    params.extend(explainer::init_explainer(
        cfg,
        &mut ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1)),
    ));
    let log = run_epochs(
        &mut params,
        tc,
        examples,
        |sess, ex| explainer_example_loss(sess, cfg, tc, ex),
        |p| Ok(token_accuracy(cfg, p, examples, tc.conditioning)?.0),
    )?;
    Ok(Trained { params, log })
}

/// Fraction of examples whose argmax answer is correct (evaluation mode).
pub fn answer_accuracy(cfg: &ModelConfig, params: &ParamSet, examples: &[Example]) -> Result<f64> {
    let mut correct = 0;
    for ex in examples {
        if predict(cfg, params, ex)? == ex.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len().max(1) as f64)
}

/// Argmax answer id for one example.
pub fn predict(cfg: &ModelConfig, params: &ParamSet, ex: &Example) -> Result<usize> {
    let mut sess = Session::eval(params);
    let f = sess.input(FEATURES_INPUT, ex.features.clone());
    let out = answering::forward(&mut sess, cfg, f, ex.question.as_deref())?;
    Ok(argmax(sess.graph.value(out.logits).data()))
}

/// First index of the largest value.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced token accuracy and the number of scored tokens.
pub fn token_accuracy(
    cfg: &ModelConfig,
    params: &ParamSet,
    examples: &[Example],
    conditioning: Conditioning,
) -> Result<(f64, usize)> {
    let (mut correct, mut total) = (0usize, 0usize);
    for ex in examples {
        let mut sess = Session::eval(params);
        let f = sess.input(FEATURES_INPUT, ex.features.clone());
        let source = AnswerSource::from_conditioning(conditioning, ex.answer);
        let out = explainer::forward(&mut sess, cfg, f, ex.question.as_deref(), source)?;
        let logits = decode_teacher_forced(&mut sess, cfg, out.context, &ex.justification)?;
        for (l, t) in logits.iter().zip(ex.justification.targets()) {
            total += 1;
            if argmax(sess.graph.value(*l).data()) == t {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / total.max(1) as f64, total))
}

/// Labels of every input leaf in a graph; used to audit what a loss consumes.
pub fn input_labels(g: &Graph) -> Vec<String> {
    g.leaves()
        .filter_map(|(_, leaf)| match leaf {
            Leaf::Input(label) => Some(label.clone()),
            Leaf::Parameter(_) => None,
        })
        .collect()
}

/// Moving average of the epoch losses with window `w`.
pub fn smoothed_losses(log: &[EpochLog], w: usize) -> Vec<f64> {
    if w == 0 || log.len() < w {
        return Vec::new();
    }
    log.windows(w)
        .map(|win| win.iter().map(|e| e.loss).sum::<f64>() / w as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskMode;
    use crate::gradcheck::finite_diff_check;

    #[test]
    fn uniform_answer_loss_is_ln4() {
        let mut g = Graph::new();
        let l = g.input("l", Tensor::zeros(&[4]));
        let loss = answer_loss(&mut g, l, 2).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-15);
        assert!(answer_loss(&mut g, l, 4).is_err());
    }

    #[test]
    fn confident_answer_loss_vanishes() {
        let mut g = Graph::new();
        let l = g.input("l", Tensor::vector(vec![0.0, 50.0, 0.0]));
        let loss = answer_loss(&mut g, l, 1).unwrap();
        assert!(g.value(loss).item() < 1e-20);
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            let mut g = Graph::new();
            let l = g.input("l", Tensor::vector(vec![0.0, k as f64 * 6.0, 0.0]));
            let loss = answer_loss(&mut g, l, 1).unwrap();
            let v = g.value(loss).item();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn answer_loss_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 0.8, 0.1]);
        let err = finite_diff_check(|g, v| answer_loss(g, v, 2), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn explanation_loss_cases() {
        let mut g = Graph::new();
        let l = g.input("l", Tensor::zeros(&[10]));
        let loss = explanation_loss(&mut g, &[l], &[3]).unwrap();
        assert!((g.value(loss).item() - 10f64.ln()).abs() < 1e-15);
        assert!(explanation_loss(&mut g, &[l], &[3, 4]).is_err());

        let a = g.input("a", Tensor::vector(vec![0.1, 0.9, -0.3, 0.4]));
        let b = g.input("b", Tensor::vector(vec![-0.5, 0.2, 0.7, 0.0]));
        let x = explanation_loss(&mut g, &[a, b], &[1, 2]).unwrap();
        let y = explanation_loss(&mut g, &[a, b], &[2, 1]).unwrap();
        assert_ne!(g.value(x), g.value(y));
    }

    #[test]
    fn explanation_loss_gradient_is_sum_of_steps() {
        let logits: Vec<Tensor> = (0..3)
            .map(|k| Tensor::vector((0..5).map(|i| ((i * 7 + k * 3) % 5) as f64 * 0.25).collect()))
            .collect();
        let targets = [1, 4, 2];
        let mut g = Graph::new();
        let vars: Vec<Var> = logits.iter().map(|t| g.input("l", t.clone())).collect();
        let loss = explanation_loss(&mut g, &vars, &targets).unwrap();
        let full = g.backward(loss).unwrap();
        for (k, &v) in vars.iter().enumerate() {
            let mut h = Graph::new();
            let others: Vec<Var> = logits.iter().map(|t| h.input("l", t.clone())).collect();
            let ce = h.cross_entropy(others[k], targets[k]).unwrap();
            let step = h.scale(ce, 1.0 / 3.0);
            let g1 = h.backward(step).unwrap();
            assert_eq!(full.get(v).unwrap(), g1.get(others[k]).unwrap());
        }
    }

    #[test]
    fn adam_zero_grad_and_frozen() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0]));
        p.insert("b", Tensor::vector(vec![3.0]));
        p.set_frozen_prefix("b", true);
        let before = p.clone();
        let mut adam = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::zeros(&[2]));
        grads.insert("b".to_string(), Tensor::vector(vec![5.0]));
        adam.step(&mut p, &grads).unwrap();
        assert_eq!(p, before);
        grads.insert("a".to_string(), Tensor::zeros(&[3]));
        assert!(adam.step(&mut p, &grads).is_err());
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![1.0]));
        let mut adam = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::vector(vec![2.0]));
        adam.step(&mut p, &grads).unwrap();
        let x = p.tensor("x").unwrap().data()[0];
        assert!((x - 0.9).abs() < 1e-7, "{x}");
    }

    fn tiny_examples(cfg: &ModelConfig, n: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|i| {
                let answer = i % cfg.num_answers;
                let mut data: Vec<f64> = (0..cfg.feature_channels * cfg.grid_cells())
                    .map(|_| rng.gen_range(-0.1..0.1))
                    .collect();
                for l in 0..cfg.grid_cells() {
                    data[answer * cfg.grid_cells() + l] += 1.0;
                }
                Example {
                    id: format!("e{i}"),
                    features: Tensor::new(vec![cfg.feature_channels, cfg.grid_rows, cfg.grid_cols], data).unwrap(),
                    question: (cfg.mode == TaskMode::Vqa).then(|| vec![3, 4]),
                    answer,
                    justification: JustificationTokens::new(vec![3 + answer, 3], cfg.explanation_vocab).unwrap(),
                }
            })
            .collect()
    }

    fn tiny_cfg(mode: TaskMode) -> ModelConfig {
        ModelConfig {
            feature_channels: 4,
            grid_rows: 2,
            grid_cols: 2,
            question_embed: 4,
            question_hidden: 6,
            pool_dim: 6,
            attention_hidden: 4,
            answer_embed: 6,
            pointing_hidden: 4,
            word_embed: 4,
            decoder_hidden: 8,
            ..ModelConfig::desk(mode, 3, 6, 8)
        }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg(TaskMode::Vqa);
        let ex = tiny_examples(&cfg, 6);
        let a = train_answerer(&cfg, &quick(3), &ex, None).unwrap();
        let b = train_answerer(&cfg, &quick(3), &ex, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        let c = train_answerer(&cfg, &TrainConfig { seed: 9, ..quick(3) }, &ex, None).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn answerer_learns_tiny_set() {
        let cfg = tiny_cfg(TaskMode::Vqa);
        let ex = tiny_examples(&cfg, 6);
        let t = train_answerer(&cfg, &quick(40), &ex, None).unwrap();
        assert_eq!(t.log.last().unwrap().accuracy, 1.0);
        assert!(t.log.last().unwrap().loss < t.log[0].loss);
    }

    #[test]
    fn freeze_keeps_answerer_bits() {
        let cfg = tiny_cfg(TaskMode::Vqa);
        let ex = tiny_examples(&cfg, 6);
        let ans = train_answerer(&cfg, &quick(2), &ex, None).unwrap().params;
        for conditioning in [Conditioning::Gt, Conditioning::Pred] {
            let tc = TrainConfig {
                freeze_answerer: true,
                conditioning,
                joint: true,
                ..quick(3)
            };
            let t = train_explainer(&cfg, &tc, &ex, &ans).unwrap();
            for (name, p) in ans.iter() {
                let after = t.params.tensor(name).unwrap();
                assert!(
                    p.tensor
                        .data()
                        .iter()
                        .zip(after.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                    "{name}"
                );
                assert!(t.params.is_frozen(name));
            }
        }
        let finetuned = train_explainer(
            &cfg,
            &TrainConfig {
                conditioning: Conditioning::Pred,
                ..quick(2)
            },
            &ex,
            &ans,
        )
        .unwrap();
        assert_ne!(finetuned.params.with_prefix("ans."), ans.with_prefix("ans."));
    }

    #[test]
    fn act_joint_training_updates_answerer_without_questions() {
        let cfg = tiny_cfg(TaskMode::Act);
        let ex = tiny_examples(&cfg, 6);
        assert!(ex.iter().all(|e| e.question.is_none()));
        let ans = answering::init_answerer(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let t = train_explainer(
            &cfg,
            &TrainConfig {
                joint: true,
                ..quick(2)
            },
            &ex,
            &ans,
        )
        .unwrap();
        assert_ne!(
            t.params.tensor("ans.classifier.w").unwrap(),
            ans.tensor("ans.classifier.w").unwrap()
        );
    }

    #[test]
    fn explainer_loss_graph_consumes_no_heatmap() {
        let cfg = tiny_cfg(TaskMode::Vqa);
        let ex = tiny_examples(&cfg, 1);
        let mut p = answering::init_answerer(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        p.extend(explainer::init_explainer(&cfg, &mut ChaCha8Rng::seed_from_u64(1)));
        for conditioning in [Conditioning::Gt, Conditioning::Pred] {
            let tc = TrainConfig {
                conditioning,
                joint: true,
                ..TrainConfig::default()
            };
            let mut sess = Session::train(&p, 0, 0.3);
            explainer_example_loss(&mut sess, &cfg, &tc, &ex[0]).unwrap();
            let labels = input_labels(&sess.graph);
            let allowed = [FEATURES_INPUT, "answer_one_hot", "h0", "c0"];
            assert!(labels.iter().all(|l| allowed.contains(&l.as_str())), "{labels:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let cfg = tiny_cfg(TaskMode::Vqa);
        assert!(train_answerer(&cfg, &quick(1), &[], None).is_err());
    }

    #[test]
    fn smoothing_window() {
        let log: Vec<EpochLog> = (0..4)
            .map(|i| EpochLog {
                epoch: i,
                split: "train".into(),
                loss: i as f64,
                accuracy: 0.0,
            })
            .collect();
        assert_eq!(smoothed_losses(&log, 2), vec![0.5, 1.5, 2.5]);
    }
}
