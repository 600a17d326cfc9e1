//! Dataset layout, record validation, vocabularies, annotator masks, and the
//! synthetic corpus generator.
//!
//! Layout under a dataset root: `features/<image_id>.pjxt`, `masks/*.pjxt`,
//! `records.jsonl`, `vocab.json`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::answering::SpatialFeatures;
use crate::config::{ModelConfig, TaskMode};
use crate::error::{Error, Result};
use crate::explainer::JustificationTokens;
use crate::map::{AttentionMap, GroundTruthHeatmap};
use crate::tensor::Tensor;
use crate::training::Example;
use crate::vocab::{count, tokenize, AnswerSpace, Vocabularies, Vocabulary};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const FEATURES_DIR: &str = "features";
pub const MASKS_DIR: &str = "masks";
pub const MAX_EXPLANATIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub id: String,
    pub image_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub answer: String,
    pub explanations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complementary_pair_id: Option<String>,
    /// Mask files relative to the dataset root, one per annotator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<String>>,
}

/// A rejected input line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub line: usize,
    pub field: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedRecords {
    pub records: Vec<ExplanationRecord>,
    pub rejections: Vec<Rejection>,
}

fn reject(line: usize, field: &str, message: impl Into<String>) -> Rejection {
    Rejection {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn non_empty_string(
    obj: &serde_json::Map<String, Value>,
    field: &str,
    line: usize,
) -> std::result::Result<(), Rejection> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(reject(line, field, "missing required field")),
        Some(Value::String(s)) if s.trim().is_empty() => Err(reject(line, field, "must not be empty")),
        Some(Value::String(_)) => Ok(()),
        Some(_) => Err(reject(line, field, "must be a string")),
    }
}

fn validate_line(text: &str, line: usize, mode: TaskMode) -> std::result::Result<ExplanationRecord, Rejection> {
    let value: Value = serde_json::from_str(text).map_err(|e| reject(line, "<line>", format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| reject(line, "<line>", "expected a JSON object"))?;
    for field in ["id", "image_id", "split", "answer"] {
        non_empty_string(obj, field, line)?;
    }
    let split = obj["split"].as_str().unwrap_or_default();
    split
        .parse::<Split>()
        .map_err(|_| reject(line, "split", format!("`{split}` is not one of train, val, test")))?;
    match (mode, obj.get("question")) {
        (TaskMode::Act, Some(q)) if !q.is_null() => {
            return Err(reject(line, "question", "activity records must not carry a question"));
        }
        (TaskMode::Vqa, _) => non_empty_string(obj, "question", line)?,
        _ => {}
    }
    match obj.get("explanations") {
        Some(Value::Array(items)) => {
            if items.is_empty() || items.len() > MAX_EXPLANATIONS {
                return Err(reject(
                    line,
                    "explanations",
                    format!("expected 1..={MAX_EXPLANATIONS} explanations, found {}", items.len()),
                ));
            }
            if items.iter().any(|e| e.as_str().is_none_or(|s| tokenize(s).is_empty())) {
                return Err(reject(
                    line,
                    "explanations",
                    "every explanation must be a non-empty string",
                ));
            }
        }
        None | Some(Value::Null) => return Err(reject(line, "explanations", "missing required field")),
        Some(_) => return Err(reject(line, "explanations", "must be an array of strings")),
    }
    if let Some(v) = obj.get("complementary_pair_id") {
        if !v.is_null() && !v.is_string() {
            return Err(reject(line, "complementary_pair_id", "must be a string"));
        }
    }
    if let Some(v) = obj.get("masks") {
        let ok = v.is_null()
            || v.as_array()
                .is_some_and(|a| !a.is_empty() && a.iter().all(Value::is_string));
        if !ok {
            return Err(reject(line, "masks", "must be a non-empty array of paths"));
        }
    }
    serde_json::from_value(value).map_err(|e| reject(line, "<line>", e.to_string()))
}

/// Parses JSON-lines text; malformed lines are collected, not fatal.
pub fn parse_records(text: &str, mode: TaskMode) -> LoadedRecords {
    let mut records = Vec::new();
    let mut rejections = Vec::new();
    let mut seen = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        match validate_line(raw, n + 1, mode) {
            Ok(r) if !seen.insert(r.id.clone()) => {
                rejections.push(reject(n + 1, "id", format!("duplicate id `{}`", r.id)));
            }
            Ok(r) => records.push(r),
            Err(e) => rejections.push(e),
        }
    }
    LoadedRecords { records, rejections }
}

pub fn load_records(path: &Path, mode: TaskMode) -> Result<LoadedRecords> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(parse_records(&text, mode))
}

/// Like [`load_records`] but fails on the first rejected line.
pub fn load_records_strict(path: &Path, mode: TaskMode) -> Result<Vec<ExplanationRecord>> {
    let loaded = load_records(path, mode)?;
    if let Some(r) = loaded.rejections.into_iter().next() {
        return Err(Error::Record {
            path: path.display().to_string(),
            line: r.line,
            field: r.field,
            message: r.message,
        });
    }
    Ok(loaded.records)
}

pub fn save_records(path: &Path, records: &[ExplanationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path.display().to_string(), e))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabOptions {
    pub top_k_answers: usize,
    pub min_count: usize,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            top_k_answers: 3000,
            min_count: 1,
        }
    }
}

/// Answer space (top-k answers) and word vocabularies from the training split.
pub fn build_vocab(records: &[ExplanationRecord], opts: VocabOptions) -> Result<Vocabularies> {
    let train: Vec<&ExplanationRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Config("cannot build vocabularies: no training records".into()));
    }
    if opts.top_k_answers == 0 {
        return Err(Error::Config("top_k_answers must be positive".into()));
    }
    let answers = AnswerSpace::top_k(&count(train.iter().map(|r| r.answer.as_str())), opts.top_k_answers);
    let q_tokens: Vec<String> = train
        .iter()
        .filter_map(|r| r.question.as_deref())
        .flat_map(tokenize)
        .collect();
    let e_tokens: Vec<String> = train
        .iter()
        .flat_map(|r| r.explanations.iter())
        .flat_map(|e| tokenize(e))
        .collect();
    Ok(Vocabularies {
        answers,
        questions: Vocabulary::from_counts(&count(q_tokens.iter().map(String::as_str)), opts.min_count),
        explanations: Vocabulary::from_counts(&count(e_tokens.iter().map(String::as_str)), opts.min_count),
    })
}

/// Sums binary annotator masks cellwise and normalizes to unit mass.
pub fn aggregate_masks(masks: &[Tensor]) -> Result<GroundTruthHeatmap> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Contract("no annotator masks".into()))?;
    if first.rank() != 2 {
        return Err(Error::Rank {
            expected: 2,
            actual: first.rank(),
        });
    }
    let mut sum = vec![0.0; first.numel()];
    for m in masks {
        if m.shape() != first.shape() {
            return Err(Error::shape("aggregate_masks", first.shape(), m.shape()));
        }
        for (s, &v) in sum.iter_mut().zip(m.data()) {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Contract(format!("mask value {v} is not binary")));
            }
            *s += v;
        }
    }
    let total: f64 = sum.iter().sum();
    if total == 0.0 {
        return Err(Error::Contract("all annotator masks are empty".into()));
    }
    let map = AttentionMap::new(
        first.shape()[0],
        first.shape()[1],
        sum.iter().map(|v| v / total).collect(),
    )?;
    Ok(GroundTruthHeatmap {
        map,
        annotators: masks.len(),
    })
}

/// Loads `<dir>/<image_id>.pjxt`, optionally validating its shape against `cfg`.
pub fn load_features(image_id: &str, dir: &Path, cfg: Option<&ModelConfig>) -> Result<SpatialFeatures> {
    let path = dir.join(format!("{image_id}.pjxt"));
    let f = SpatialFeatures::new(Tensor::load(&path)?, path.display().to_string())?;
    if let Some(cfg) = cfg {
        f.check_against(cfg)?;
    }
    Ok(f)
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub features_dir: PathBuf,
    pub records: Vec<ExplanationRecord>,
    pub vocabs: Option<Vocabularies>,
    vocab_path: PathBuf,
}

impl Dataset {
    pub fn open(root: &Path, mode: TaskMode) -> Result<Self> {
        Dataset::open_with(root, None, None, mode)
    }

    /// Opens `root` with optional overrides for the feature directory and vocabulary file.
    pub fn open_with(root: &Path, features: Option<&Path>, vocab: Option<&Path>, mode: TaskMode) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::MissingFile(root.to_path_buf()));
        }
        let features_dir = features.map_or_else(|| root.join(FEATURES_DIR), Path::to_path_buf);
        if !features_dir.is_dir() {
            return Err(Error::MissingFile(features_dir));
        }
        let records = load_records_strict(&root.join(RECORDS_FILE), mode)?;
        let vocab_path = vocab.map_or_else(|| root.join(VOCAB_FILE), Path::to_path_buf);
        let vocabs = if vocab_path.exists() {
            let text = fs::read_to_string(&vocab_path)
                .map_err(|e| Error::io(format!("reading {}", vocab_path.display()), e))?;
            Some(Vocabularies::from_json(&text)?)
        } else if vocab.is_some() {
            return Err(Error::MissingFile(vocab_path));
        } else {
            None
        };
        Ok(Dataset {
            root: root.to_path_buf(),
            features_dir,
            records,
            vocabs,
            vocab_path,
        })
    }

    pub fn vocabs(&self) -> Result<&Vocabularies> {
        self.vocabs
            .as_ref()
            .ok_or_else(|| Error::MissingFile(self.vocab_path.clone()))
    }

    pub fn split(&self, split: Split) -> Vec<&ExplanationRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn features(&self, record: &ExplanationRecord, cfg: Option<&ModelConfig>) -> Result<SpatialFeatures> {
        load_features(&record.image_id, &self.features_dir, cfg)
    }

    /// Aggregated annotator heatmap, if the record lists masks.
    pub fn heatmap(&self, record: &ExplanationRecord) -> Result<Option<GroundTruthHeatmap>> {
        let Some(paths) = &record.masks else {
            return Ok(None);
        };
        let masks = paths
            .iter()
            .map(|p| Tensor::load(&self.root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        aggregate_masks(&masks).map(Some)
    }

    /// Encoded question tokens; `None` in activity mode.
    pub fn question(&self, record: &ExplanationRecord, mode: TaskMode) -> Result<Option<Vec<usize>>> {
        let v = self.vocabs()?;
        Ok(match mode {
            TaskMode::Act => None,
            TaskMode::Vqa => Some(v.questions.encode_text(record.question.as_deref().unwrap_or(""))),
        })
    }

    /// Training examples; the justification is the first explanation.
    pub fn examples(&self, records: &[&ExplanationRecord], cfg: &ModelConfig) -> Result<Vec<Example>> {
        let v = self.vocabs()?;
        records
            .iter()
            .map(|r| {
                let answer = v.answers.id(&r.answer).ok_or_else(|| {
                    Error::Config(format!(
                        "record {}: answer `{}` is outside the answer space",
                        r.id, r.answer
                    ))
                })?;
                let question = self.question(r, cfg.mode)?;
                let mut words = v.explanations.encode_text(&r.explanations[0]);
                words.truncate(cfg.max_len.saturating_sub(1));
                Ok(Example {
                    id: r.id.clone(),
                    features: self.features(r, Some(cfg))?.tensor().clone(),
                    question,
                    answer,
                    justification: JustificationTokens::new(words, v.explanations.len())?,
                })
            })
            .collect()
    }
}

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const ATTRIBUTES: [&str; 3] = ["red", "blue", "green"];
const SHAPE_PHRASES: [&str; 4] = ["no corners", "four equal sides", "three corners", "five points"];
const QUESTIONS: [&str; 3] = ["what shape is this", "which shape is shown", "what is the shape"];
/// Feature channels with fixed meaning in synthetic data; the rest are noise.
pub const SHAPE_CHANNELS: std::ops::Range<usize> = 0..4;
pub const OBJECT_CHANNEL: usize = 4;
pub const ATTRIBUTE_CHANNELS: std::ops::Range<usize> = 5..8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub mode: TaskMode,
    pub train: usize,
    pub val: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub answers: usize,
    pub patch: usize,
    /// Objectness and attribute signal added inside the patch.
    pub signal: f64,
    /// Shape signal inside the patch, kept fainter than `signal`.
    pub shape_signal: f64,
    pub noise: f64,
    /// Probability that a background cell carries a distractor attribute.
    pub distractors: f64,
    pub annotators: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mode: TaskMode::Vqa,
            train: 50,
            val: 0,
            channels: 16,
            rows: 14,
            cols: 14,
            answers: 4,
            patch: 3,
            signal: 3.0,
            shape_signal: 2.0,
            noise: 0.3,
            distractors: 0.5,
            annotators: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train + self.val == 0 {
            return Err(Error::Config("synthetic corpus needs at least one instance".into()));
        }
        if self.answers == 0 || self.answers > SHAPES.len() {
            return Err(Error::Config(format!("answers must be in 1..={}", SHAPES.len())));
        }
        if self.channels < ATTRIBUTE_CHANNELS.end {
            return Err(Error::Config(format!(
                "channels must be at least {}",
                ATTRIBUTE_CHANNELS.end
            )));
        }
        if self.patch == 0 || self.patch > self.rows || self.patch > self.cols {
            return Err(Error::Config("patch must fit inside the grid".into()));
        }
        if self.annotators == 0 {
            return Err(Error::Config("annotators must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.distractors) {
            return Err(Error::Config("noise must be >= 0 and distractors in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocabs: &Vocabularies) -> ModelConfig {
        let mut cfg = ModelConfig::desk(
            self.mode,
            vocabs.answers.len(),
            vocabs.questions.len(),
            vocabs.explanations.len(),
        );
        cfg.feature_channels = self.channels;
        cfg.grid_rows = self.rows;
        cfg.grid_cols = self.cols;
        cfg
    }
}

/// In-memory synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<ExplanationRecord>,
    pub features: BTreeMap<String, Tensor>,
    pub masks: BTreeMap<String, Tensor>,
    /// Top-left cell of each record's hot patch.
    pub hot: BTreeMap<String, (usize, usize)>,
}

fn justification(attr: &str, shape: usize, variant: usize) -> String {
    let phrase = SHAPE_PHRASES[shape];
    match variant {
        0 => format!("the {attr} shape has {phrase}"),
        1 => format!("because the {attr} shape has {phrase}"),
        _ => format!("it is {attr} and has {phrase}"),
    }
}

/// Deterministic corpus: the answer is written into the channels of a hot
/// patch, which also carries the attribute word of the justification.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let (r, c, ch, k) = (cfg.rows, cfg.cols, cfg.channels, cfg.patch);
    let mut out = SynthCorpus {
        records: Vec::new(),
        features: BTreeMap::new(),
        masks: BTreeMap::new(),
        hot: BTreeMap::new(),
    };
    let total = cfg.train + cfg.val;
    for i in 0..total {
        let split = if i < cfg.train { Split::Train } else { Split::Val };
        // Validation instances come in complementary pairs: same layout, other answer.
        let v = i.saturating_sub(cfg.train);
        let paired = split == Split::Val && cfg.answers > 1 && (v / 2) * 2 + 1 < cfg.val;
        let pair = paired.then_some(v / 2);
        let (shape, attr, top, left) = if paired && v % 2 == 1 {
            let prev = &out.records[out.records.len() - 1];
            let prev_shape = SHAPES.iter().position(|s| *s == prev.answer).unwrap_or(0);
            let attr = ATTRIBUTES
                .iter()
                .position(|a| prev.explanations[0].contains(a))
                .unwrap_or(0);
            let (t, l) = out.hot[&prev.id];
            let shape = (prev_shape + 1 + rng.gen_range(0..cfg.answers - 1)) % cfg.answers;
            (shape, attr, t, l)
        } else {
            (
                i % cfg.answers,
                rng.gen_range(0..ATTRIBUTES.len()),
                rng.gen_range(0..=r - k),
                rng.gen_range(0..=c - k),
            )
        };
        let id = format!("syn{i:04}");
        let image_id = format!("img{i:04}");
        let mut data = vec![0.0; ch * r * c];
        for v in data.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        for y in 0..r {
            for x in 0..c {
                let cell = y * c + x;
                let inside = (top..top + k).contains(&y) && (left..left + k).contains(&x);
                if inside {
                    data[(SHAPE_CHANNELS.start + shape) * r * c + cell] += cfg.shape_signal;
                    data[OBJECT_CHANNEL * r * c + cell] += cfg.signal;
                    data[(ATTRIBUTE_CHANNELS.start + attr) * r * c + cell] += cfg.signal;
                } else if rng.gen::<f64>() < cfg.distractors {
                    let d = rng.gen_range(0..ATTRIBUTES.len());
                    data[(ATTRIBUTE_CHANNELS.start + d) * r * c + cell] += cfg.signal;
                }
            }
        }
        out.features
            .insert(image_id.clone(), Tensor::new(vec![ch, r, c], data)?);
        let mut mask_paths = Vec::new();
        for a in 0..cfg.annotators {
            let dy = rng.gen_range(-1i64..=1);
            let dx = rng.gen_range(-1i64..=1);
            let mut m = vec![0.0; r * c];
            for y in top..top + k {
                for x in left..left + k {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if (0..r as i64).contains(&yy) && (0..c as i64).contains(&xx) {
                        m[yy as usize * c + xx as usize] = 1.0;
                    }
                }
            }
            let name = format!("{MASKS_DIR}/{id}_a{a}.pjxt");
            out.masks.insert(name.clone(), Tensor::new(vec![r, c], m)?);
            mask_paths.push(name);
        }
        let explanations = if split == Split::Train {
            vec![justification(ATTRIBUTES[attr], shape, 0)]
        } else {
            (0..MAX_EXPLANATIONS)
                .map(|v| justification(ATTRIBUTES[attr], shape, v))
                .collect()
        };
        out.hot.insert(id.clone(), (top, left));
        out.records.push(ExplanationRecord {
            id,
            image_id,
            split,
            question: (cfg.mode == TaskMode::Vqa).then(|| QUESTIONS[rng.gen_range(0..QUESTIONS.len())].to_string()),
            answer: SHAPES[shape].to_string(),
            explanations,
            complementary_pair_id: pair.map(|p| format!("pair{p:04}")),
            masks: Some(mask_paths),
        });
    }
    Ok(out)
}

impl SynthCorpus {
    /// Writes the standard layout with a vocabulary built from the train split.
    pub fn write(&self, root: &Path, opts: VocabOptions) -> Result<Vocabularies> {
        for dir in [root.to_path_buf(), root.join(FEATURES_DIR), root.join(MASKS_DIR)] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        for (image, t) in &self.features {
            t.save(&root.join(FEATURES_DIR).join(format!("{image}.pjxt")))?;
        }
        for (name, t) in &self.masks {
            t.save(&root.join(name))?;
        }
        save_records(&root.join(RECORDS_FILE), &self.records)?;
        let vocabs = build_vocab(&self.records, opts)?;
        let path = root.join(VOCAB_FILE);
        fs::write(&path, vocabs.to_json() + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(vocabs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, answer: &str) -> ExplanationRecord {
        ExplanationRecord {
            id: id.into(),
            image_id: format!("im_{id}"),
            split: Split::Train,
            question: Some("what is it".into()),
            answer: answer.into(),
            explanations: vec![format!("the thing is {answer}")],
            complementary_pair_id: None,
            masks: None,
        }
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let mut records = vec![rec("a", "x"), rec("b", "y")];
        records[1].split = Split::Test;
        records[1].complementary_pair_id = Some("p1".into());
        records[1].masks = Some(vec!["masks/b.pjxt".into()]);
        records[1].explanations = vec!["one".into(), "two".into(), "three".into()];
        save_records(&p, &records).unwrap();
        assert_eq!(load_records_strict(&p, TaskMode::Vqa).unwrap(), records);
    }

    #[test]
    fn one_missing_answer_is_one_rejection() {
        let lines: Vec<String> = (0..5)
            .map(|i| {
                let mut v = serde_json::to_value(rec(&format!("r{i}"), "x")).unwrap();
                if i == 3 {
                    v.as_object_mut().unwrap().remove("answer");
                }
                v.to_string()
            })
            .collect();
        let loaded = parse_records(&lines.join("\n"), TaskMode::Vqa);
        assert_eq!(loaded.records.len(), 4);
        assert_eq!(loaded.rejections, vec![reject(4, "answer", "missing required field")]);
    }

    #[test]
    fn rejections_name_fields() {
        let cases = [
            (
                r#"{"id":"a","image_id":"i","split":"train","answer":"x","explanations":["e"],"question":"q?"}"#,
                None,
            ),
            (r#"not json"#, Some("<line>")),
            (
                r#"{"id":"a","image_id":"i","split":"dev","answer":"x","explanations":["e"],"question":"q"}"#,
                Some("split"),
            ),
            (
                r#"{"id":"a","image_id":"i","split":"train","answer":"","explanations":["e"],"question":"q"}"#,
                Some("answer"),
            ),
            (
                r#"{"id":"a","image_id":"i","split":"train","answer":"x","explanations":[],"question":"q"}"#,
                Some("explanations"),
            ),
            (
                r#"{"id":"a","image_id":"i","split":"train","answer":"x","explanations":["a","b","c","d"],"question":"q"}"#,
                Some("explanations"),
            ),
            (
                r#"{"id":"a","image_id":"i","split":"train","answer":"x","explanations":["e"]}"#,
                Some("question"),
            ),
            (
                r#"{"id":"a","image_id":"i","split":"train","answer":"x","explanations":["e"],"question":"q","masks":[1]}"#,
                Some("masks"),
            ),
            (r#"[1,2]"#, Some("<line>")),
        ];
        for (text, field) in cases {
            let loaded = parse_records(text, TaskMode::Vqa);
            match field {
                None => assert!(loaded.rejections.is_empty(), "{text}"),
                Some(f) => {
                    assert_eq!(loaded.rejections.len(), 1, "{text}");
                    assert_eq!(loaded.rejections[0].field, f, "{text}");
                    assert_eq!(loaded.rejections[0].line, 1);
                }
            }
        }
    }

    #[test]
    fn act_records_reject_questions() {
        let with_q = serde_json::to_string(&rec("a", "x")).unwrap();
        let loaded = parse_records(&with_q, TaskMode::Act);
        assert_eq!(loaded.rejections[0].field, "question");
        let mut r = rec("a", "x");
        r.question = None;
        let loaded = parse_records(&serde_json::to_string(&r).unwrap(), TaskMode::Act);
        assert!(loaded.rejections.is_empty());
    }

    #[test]
    fn duplicate_ids_and_strict_errors() {
        let line = serde_json::to_string(&rec("a", "x")).unwrap();
        let loaded = parse_records(&format!("{line}\n\n{line}"), TaskMode::Vqa);
        assert_eq!(loaded.rejections, vec![reject(3, "id", "duplicate id `a`")]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        fs::write(&p, format!("{line}\n{{}}\n")).unwrap();
        let err = load_records_strict(&p, TaskMode::Vqa).unwrap_err();
        assert!(
            matches!(err, Error::Record { line: 2, ref field, .. } if field == "id"),
            "{err}"
        );
        assert!(matches!(
            load_records(&dir.path().join("none"), TaskMode::Vqa),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn vocab_top_k_and_ties() {
        let recs: Vec<_> = ["a", "a", "a", "b", "b", "c"]
            .iter()
            .enumerate()
            .map(|(i, a)| rec(&i.to_string(), a))
            .collect();
        let opts = |k| VocabOptions {
            top_k_answers: k,
            min_count: 1,
        };
        assert_eq!(build_vocab(&recs, opts(2)).unwrap().answers.labels(), ["a", "b"]);
        let tie = vec![rec("1", "b"), rec("2", "a"), rec("3", "b"), rec("4", "a")];
        assert_eq!(build_vocab(&tie, opts(1)).unwrap().answers.labels(), ["a"]);
        let v1 = build_vocab(&recs, opts(3)).unwrap();
        let v2 = build_vocab(&recs, opts(3)).unwrap();
        assert_eq!(v1.to_json(), v2.to_json());
        assert!(build_vocab(&[], opts(1)).is_err());
        let mut val = rec("v", "z");
        val.split = Split::Val;
        assert!(build_vocab(&[val], opts(1)).is_err());
    }

    #[test]
    fn min_count_filters_explanation_words() {
        let recs = vec![rec("1", "x"), rec("2", "x"), rec("3", "y")];
        let v = build_vocab(
            &recs,
            VocabOptions {
                top_k_answers: 5,
                min_count: 2,
            },
        )
        .unwrap();
        let words = &v.explanations.words()[3..];
        assert_eq!(words, ["is", "the", "thing", "x"]);
    }

    fn mask(rows: usize, cols: usize, on: &[(usize, usize)]) -> Tensor {
        let mut d = vec![0.0; rows * cols];
        for &(r, c) in on {
            d[r * cols + c] = 1.0;
        }
        Tensor::new(vec![rows, cols], d).unwrap()
    }

    #[test]
    fn mask_aggregation() {
        let h = aggregate_masks(&[mask(2, 2, &[(0, 0)]), mask(2, 2, &[(0, 0), (0, 1)])]).unwrap();
        assert_eq!(h.map.values(), &[2.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
        assert_eq!(h.annotators, 2);
        let h = aggregate_masks(&[mask(3, 3, &[(0, 0), (1, 1), (2, 2), (0, 2)])]).unwrap();
        assert_eq!(h.map.values().iter().filter(|&&v| v == 0.25).count(), 4);
        assert!(aggregate_masks(&[mask(2, 2, &[])]).is_err());
        assert!(aggregate_masks(&[mask(2, 2, &[(0, 0)]), mask(3, 2, &[(0, 0)])]).is_err());
        assert!(aggregate_masks(&[Tensor::filled(&[2, 2], 0.5)]).is_err());
        assert!(aggregate_masks(&[]).is_err());
    }

    #[test]
    fn random_mask_triples_have_unit_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let masks: Vec<Tensor> = (0..3)
                .map(|_| {
                    let d: Vec<f64> = (0..196)
                        .map(|_| if rng.gen::<f64>() < 0.1 { 1.0 } else { 0.0 })
                        .collect();
                    Tensor::new(vec![14, 14], d).unwrap()
                })
                .collect();
            if masks.iter().all(|m| m.sum() == 0.0) {
                continue;
            }
            let h = aggregate_masks(&masks).unwrap();
            assert!((h.map.values().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn adding_a_mask_never_lowers_its_union_weight() {
        let base = [mask(4, 4, &[(0, 0), (1, 1)]), mask(4, 4, &[(2, 2)])];
        let extra = mask(4, 4, &[(1, 1), (3, 3)]);
        let union = |h: &GroundTruthHeatmap| h.map.values()[5] + h.map.values()[15];
        let before = aggregate_masks(&base).unwrap();
        let after = aggregate_masks(&[base[0].clone(), base[1].clone(), extra]).unwrap();
        assert!(union(&after) >= union(&before));
    }

    #[test]
    fn feature_loading_errors() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::filled(&[16, 14, 14], 0.5);
        t.save(&dir.path().join("ok.pjxt")).unwrap();
        let f = load_features("ok", dir.path(), None).unwrap();
        assert_eq!(f.tensor(), &t);
        assert!(matches!(
            load_features("none", dir.path(), None),
            Err(Error::MissingFile(_))
        ));
        let bytes = t.to_bytes();
        fs::write(dir.path().join("cut.pjxt"), &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_features("cut", dir.path(), None),
            Err(Error::Corrupt { .. })
        ));
        Tensor::filled(&[14, 14], 1.0)
            .save(&dir.path().join("flat.pjxt"))
            .unwrap();
        assert!(matches!(
            load_features("flat", dir.path(), None),
            Err(Error::Rank { expected: 3, actual: 2 })
        ));
        let mut cfg = ModelConfig::desk(TaskMode::Vqa, 4, 5, 5);
        cfg.feature_channels = 8;
        assert!(load_features("ok", dir.path(), Some(&cfg)).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let cfg = SynthConfig {
            val: 6,
            ..Default::default()
        };
        let a = synth_dataset(&cfg, 7).unwrap();
        assert_eq!(a, synth_dataset(&cfg, 7).unwrap());
        assert_ne!(a, synth_dataset(&cfg, 8).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let v = a.write(dir.path(), VocabOptions::default()).unwrap();
        assert!(v.explanations.len() <= 40, "{}", v.explanations.len());
        assert_eq!(v.answers.len(), 4);
        let ds = Dataset::open(dir.path(), TaskMode::Vqa).unwrap();
        assert_eq!(ds.records, a.records);
        let val = ds.split(Split::Val);
        assert_eq!(val.len(), 6);
        assert!(val.iter().all(|r| r.explanations.len() == 3));
        for pair in val.chunks(2) {
            assert_eq!(pair[0].complementary_pair_id, pair[1].complementary_pair_id);
            assert_ne!(pair[0].answer, pair[1].answer);
            assert_eq!(a.hot[&pair[0].id], a.hot[&pair[1].id]);
        }
        let model = cfg.model_config(&v);
        let ex = ds.examples(&ds.split(Split::Train), &model).unwrap();
        assert_eq!(ex.len(), 50);
        for r in &ds.records {
            let h = ds.heatmap(r).unwrap().unwrap();
            assert_eq!(h.annotators, 3);
        }
    }

    #[test]
    fn act_synth_has_no_questions() {
        let cfg = SynthConfig {
            mode: TaskMode::Act,
            train: 8,
            ..Default::default()
        };
        let c = synth_dataset(&cfg, 1).unwrap();
        assert!(c.records.iter().all(|r| r.question.is_none()));
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path(), VocabOptions::default()).unwrap();
        let ds = Dataset::open(dir.path(), TaskMode::Act).unwrap();
        let v = ds.vocabs().unwrap();
        let ex = ds.examples(&ds.split(Split::Train), &cfg.model_config(v)).unwrap();
        assert!(ex.iter().all(|e| e.question.is_none()));
    }

    #[test]
    fn hot_patch_linear_probe_is_exact() {
        let cfg = SynthConfig::default();
        let c = synth_dataset(&cfg, 11).unwrap();
        for r in &c.records {
            let t = &c.features[&r.image_id];
            let (top, left) = c.hot[&r.id];
            // Probe: mean of each shape channel over the hot patch, argmax.
            let score = |s: usize| -> f64 {
                let mut acc = 0.0;
                for y in top..top + cfg.patch {
                    for x in left..left + cfg.patch {
                        acc += t.data()[(SHAPE_CHANNELS.start + s) * 196 + y * 14 + x];
                    }
                }
                acc / (cfg.patch * cfg.patch) as f64
            };
            let pred = (0..cfg.answers).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
            assert_eq!(SHAPES[pred], r.answer);
        }
    }
}
