//! Corpus-level text metrics: BLEU-4, ROUGE-L, CIDEr-D, plus a plug-in
//! contract for externally computed metrics (METEOR, SPICE).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::ScoreReport;
use crate::vocab::tokenize;

pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;
const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Instances are kept sorted by id so every score is independent of input order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    instances: Vec<TextInstance>,
}

#[derive(Deserialize, Serialize)]
struct CorpusLine {
    id: String,
    candidate: String,
    references: Vec<String>,
}

impl Corpus {
    pub fn new(mut instances: Vec<TextInstance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Metric("empty corpus".into()));
        }
        instances.sort_by(|a, b| a.id.cmp(&b.id));
        for w in instances.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Metric(format!("duplicate instance id {}", w[0].id)));
            }
        }
        if let Some(bad) = instances.iter().find(|i| i.references.is_empty()) {
            return Err(Error::Metric(format!("instance {} has no references", bad.id)));
        }
        Ok(Corpus { instances })
    }

    /// Builds a corpus from raw strings using the shared tokenizer.
    pub fn from_text(items: Vec<(String, String, Vec<String>)>) -> Result<Self> {
        Corpus::new(
            items
                .into_iter()
                .map(|(id, cand, refs)| TextInstance {
                    id,
                    candidate: tokenize(&cand),
                    references: refs.iter().map(|r| tokenize(r)).collect(),
                })
                .collect(),
        )
    }

    /// JSON lines of `{id, candidate, references: [..]}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: CorpusLine = serde_json::from_str(line).map_err(|e| Error::Record {
                path: path.display().to_string(),
                line: n + 1,
                field: "corpus line".into(),
                message: e.to_string(),
            })?;
            items.push((l.id, l.candidate, l.references));
        }
        Corpus::from_text(items)
    }

    pub fn instances(&self) -> &[TextInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default)]
struct BleuStats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    cand_len: usize,
    ref_len: usize,
}

fn bleu_stats(inst: &TextInstance) -> BleuStats {
    let mut s = BleuStats {
        cand_len: inst.candidate.len(),
        ..Default::default()
    };
    // Closest reference length, shorter one on ties.
    s.ref_len = inst
        .references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(s.cand_len), l))
        .unwrap_or(0);
    for n in 1..=MAX_ORDER {
        let cand = ngrams(&inst.candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &inst.references {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        s.totals[n - 1] = inst.candidate.len().saturating_sub(n - 1);
        s.matches[n - 1] = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

fn bleu_from(s: &BleuStats, smooth: bool) -> f64 {
    if s.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let (m, t) = if smooth && n > 0 {
            (s.matches[n] as f64 + 1.0, s.totals[n] as f64 + 1.0)
        } else {
            (s.matches[n] as f64, s.totals[n] as f64)
        };
        if m == 0.0 || t == 0.0 {
            return 0.0;
        }
        log_sum += (m / t).ln();
    }
    let bp = if s.cand_len > s.ref_len {
        1.0
    } else {
        (1.0 - s.ref_len as f64 / s.cand_len as f64).exp()
    };
    bp * (log_sum / MAX_ORDER as f64).exp()
}

/// Corpus BLEU-4; `smooth` adds one to numerator and denominator for orders 2..4.
pub fn bleu4(corpus: &Corpus, smooth: bool) -> f64 {
    let mut total = BleuStats::default();
    for inst in corpus.instances() {
        let s = bleu_stats(inst);
        for n in 0..MAX_ORDER {
            total.matches[n] += s.matches[n];
            total.totals[n] += s.totals[n];
        }
        total.cand_len += s.cand_len;
        total.ref_len += s.ref_len;
    }
    bleu_from(&total, smooth)
}

/// Smoothed BLEU-4 of each instance on its own.
pub fn sentence_bleu4(inst: &TextInstance) -> f64 {
    bleu_from(&bleu_stats(inst), true)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_instance(inst: &TextInstance) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    inst.references
        .iter()
        .map(|r| {
            let l = lcs(&inst.candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / inst.candidate.len() as f64;
            let rc = l / r.len() as f64;
            (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean over instances of the best LCS F-measure against any reference.
pub fn rouge_l(corpus: &Corpus) -> f64 {
    let n = corpus.len() as f64;
    corpus.instances().iter().map(rouge_l_instance).sum::<f64>() / n
}

type NgramVec<'a> = [BTreeMap<&'a [String], f64>; MAX_ORDER];

struct TfIdf<'a> {
    vecs: NgramVec<'a>,
    norms: [f64; MAX_ORDER],
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&[String], usize>, log_n: f64) -> TfIdf<'a> {
    let mut vecs: NgramVec<'a> = Default::default();
    let mut norms = [0.0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        for (g, c) in ngrams(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = c as f64 * (log_n - d.ln()).max(0.0);
            norms[n - 1] += w * w;
            vecs[n - 1].insert(g, w);
        }
        norms[n - 1] = norms[n - 1].sqrt();
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_ORDER {
        let mut val = 0.0;
        for (g, &hw) in &h.vecs[n] {
            if let Some(&rw) = r.vecs[n].get(g) {
                val += hw.min(rw) * rw;
            }
        }
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= h.norms[n] * r.norms[n];
        }
        total += val * penalty;
    }
    total / MAX_ORDER as f64
}

fn distinct_refs(inst: &TextInstance) -> Vec<&Vec<String>> {
    let mut seen = HashSet::new();
    inst.references.iter().filter(|r| seen.insert(*r)).collect()
}

/// Per-instance CIDEr-D scores (x10). IDF uses reference document frequencies;
/// identical references of one instance count once.
pub fn cider_instances(corpus: &Corpus) -> Result<Vec<f64>> {
    if corpus.len() < 2 {
        return Err(Error::Metric(
            "CIDEr needs at least two instances for document frequencies".into(),
        ));
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for inst in corpus.instances() {
        let mut grams: HashSet<&[String]> = HashSet::new();
        for r in &inst.references {
            for n in 1..=MAX_ORDER {
                grams.extend(ngrams(r, n).into_keys());
            }
        }
        for g in grams {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    Ok(corpus
        .instances()
        .iter()
        .map(|inst| {
            let h = tfidf(&inst.candidate, &df, log_n);
            let refs = distinct_refs(inst);
            let s: f64 = refs.iter().map(|r| cider_sim(&h, &tfidf(r, &df, log_n))).sum();
            10.0 * s / refs.len() as f64
        })
        .collect())
}

pub fn cider(corpus: &Corpus) -> Result<f64> {
    let v = cider_instances(corpus)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// A metric computed outside this crate.
pub trait ExternalMetric {
    fn name(&self) -> &str;
    fn score(&self, corpus: &Corpus) -> Result<f64>;
}

/// Runs `program args..`, writing `{"candidates": [..], "references": [[..]]}`
/// to stdin and parsing a single number from stdout.
#[derive(Clone, Debug)]
pub struct CommandMetric {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalMetric for CommandMetric {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, corpus: &Corpus) -> Result<f64> {
        let payload = serde_json::json!({
            "candidates": corpus.instances().iter().map(|i| i.candidate.join(" ")).collect::<Vec<_>>(),
            "references": corpus
                .instances()
                .iter()
                .map(|i| i.references.iter().map(|r| r.join(" ")).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        });
        let ctx = format!("running {}", self.program);
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(ctx.clone(), e))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(payload.to_string().as_bytes())
            .map_err(|e| Error::io(ctx.clone(), e))?;
        let out = child.wait_with_output().map_err(|e| Error::io(ctx.clone(), e))?;
        if !out.status.success() {
            return Err(Error::Metric(format!("{} exited with {}", self.program, out.status)));
        }
        String::from_utf8_lossy(&out.stdout)
            .trim()
            .parse()
            .map_err(|_| Error::Metric(format!("{} did not print a number", self.program)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub value: Option<f64>,
    pub available: bool,
    /// Published GT-answer-conditioned result for comparison, 0-100 scale.
    pub reference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextReport {
    pub n: usize,
    pub metrics: BTreeMap<String, MetricEntry>,
    pub per_instance: Vec<ScoreReport>,
    pub notes: Vec<String>,
}

pub const REFERENCE_SCORES: [(&str, f64); 5] = [
    ("BLEU4", 19.8),
    ("METEOR", 18.6),
    ("ROUGEL", 44.0),
    ("CIDEr", 73.4),
    ("SPICE", 15.4),
];

/// All built-in metrics, plus any plug-ins; METEOR and SPICE are marked
/// unavailable unless a plug-in with that name is supplied.
pub fn score_text(corpus: &Corpus, plugins: &[&dyn ExternalMetric]) -> Result<TextReport> {
    let ids: Vec<String> = corpus.instances().iter().map(|i| i.id.clone()).collect();
    let per =
        |metric: &str, vals: Vec<f64>| ScoreReport::from_values(metric, ids.iter().cloned().zip(vals).collect(), 0);
    let bleu = bleu4(corpus, true);
    let rouge_vals: Vec<f64> = corpus.instances().iter().map(rouge_l_instance).collect();
    let cider_vals = cider_instances(corpus)?;
    let mut values: BTreeMap<&str, Option<f64>> = BTreeMap::new();
    values.insert("BLEU4", Some(bleu));
    values.insert("ROUGEL", Some(rouge_l(corpus)));
    values.insert("CIDEr", Some(cider_vals.iter().sum::<f64>() / cider_vals.len() as f64));
    values.insert("METEOR", None);
    values.insert("SPICE", None);
    let mut metrics = BTreeMap::new();
    for p in plugins {
        metrics.insert(
            p.name().to_string(),
            MetricEntry {
                value: Some(p.score(corpus)?),
                available: true,
                reference: None,
            },
        );
    }
    for (name, reference) in REFERENCE_SCORES {
        if let Some(m) = metrics.get_mut(name) {
            m.reference = Some(reference);
            continue;
        }
        let value = values[name];
        metrics.insert(
            name.to_string(),
            MetricEntry {
                value,
                available: value.is_some(),
                reference: Some(reference),
            },
        );
    }
    Ok(TextReport {
        n: corpus.len(),
        metrics,
        per_instance: vec![
            per("BLEU4", corpus.instances().iter().map(sentence_bleu4).collect()),
            per("ROUGEL", rouge_vals),
            per("CIDEr", cider_vals),
        ],
        notes: vec![
            "BLEU4 is corpus-level with +1 smoothing on orders 2-4; per-instance BLEU4 is sentence-level".into(),
            "METEOR and SPICE need external resources; supply them as plug-ins".into(),
            "reference values are published GT-conditioned VQA-X scores, reported as 100 x the values computed here; tokenization differs, no parity claimed".into(),
        ],
    })
}
