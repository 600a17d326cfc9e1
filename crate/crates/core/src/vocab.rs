//! Tokenizer, word vocabularies, and the answer space.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Lowercase, drop punctuation, split on whitespace.
///
/// Shared by dataset preparation and text scoring.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c.to_lowercase().next().unwrap_or(c)
            } else if c == '-' || c == '/' {
                ' '
            } else {
                '\0'
            }
        })
        .filter(|&c| c != '\0')
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

/// Sort `(item, count)` by count descending, then lexicographically.
fn ranked(counts: &HashMap<String, usize>) -> Vec<(String, usize)> {
    let mut items: Vec<(String, usize)> = counts.iter().map(|(k, &v)| (k.clone(), v)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items
}

/// Word list with reserved ids `0: <bos>`, `1: <eos>`, `2: <unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Words with `count >= min_count`, most frequent first.
    pub fn from_counts(counts: &HashMap<String, usize>, min_count: usize) -> Self {
        let words = ranked(counts)
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !RESERVED.contains(&w.as_str()))
            .map(|(w, _)| w);
        Self::from_words(words)
    }

    /// Builds from non-reserved words in id order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, index }
    }

    /// Full list including reserved entries; validates its prefix.
    pub fn from_full_list(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[..3] != RESERVED {
            return Err(Error::Config("vocabulary must start with <bos>, <eos>, <unk>".into()));
        }
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::Config("vocabulary contains duplicate words".into()));
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(&tokenize(text))
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

/// The `top_k` most frequent answers, indexed from zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerSpace {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerSpace {
    pub fn top_k(counts: &HashMap<String, usize>, k: usize) -> Self {
        Self::from_labels(ranked(counts).into_iter().take(k).map(|(a, _)| a).collect())
    }

    pub fn from_labels(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }
}

/// The three vocabularies of a dataset, as stored in `vocab.json`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabularies {
    pub answers: AnswerSpace,
    pub questions: Vocabulary,
    pub explanations: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    answers: Vec<String>,
    questions: Vec<String>,
    explanations: Vec<String>,
}

impl Vocabularies {
    pub fn to_json(&self) -> String {
        let file = VocabFile {
            answers: self.answers.labels.clone(),
            questions: self.questions.words.clone(),
            explanations: self.explanations.words.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| Error::json("vocab.json", e))?;
        Ok(Self {
            answers: AnswerSpace::from_labels(file.answers),
            questions: Vocabulary::from_full_list(file.questions)?,
            explanations: Vocabulary::from_full_list(file.explanations)?,
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Counts occurrences of each item.
pub fn count<'a>(items: impl IntoIterator<Item = &'a str>) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for it in items {
        *counts.entry(it.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Sorted view of a count table, for logging.
pub fn sorted_counts(counts: &HashMap<String, usize>) -> BTreeMap<String, usize> {
    counts.iter().map(|(k, v)| (k.clone(), *v)).collect()
}
