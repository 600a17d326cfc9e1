//! Subcommand implementations. Each returns a JSON summary for stdout.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use pjx_core::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use pjx_core::dataset::{self, aggregate_masks, Dataset, ExplanationRecord, Split};
use pjx_core::decode::explain as run_explain;
use pjx_core::explainer::AnswerSource;
use pjx_core::pointing::{baseline_random_point, baseline_uniform, score_pointing};
use pjx_core::report::write_json;
use pjx_core::text_metrics::{score_text, Corpus, TextReport};
use pjx_core::training::{train_answerer as fit_answerer, train_explainer as fit_explainer, Example};
use pjx_core::{AttentionMap, Conditioning, GroundTruthHeatmap, ModelConfig, ParamSet, TaskMode, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{create_dir, existing_dir, existing_file, Baseline, RunConfig};
use crate::error::{CliError, CliResult};

pub const LOG_FILE: &str = "log.json";
pub const EXPLANATIONS_FILE: &str = "explanations.jsonl";
pub const POINTING_DIR: &str = "pointing";
pub const TEXT_REPORT_FILE: &str = "text_scores.json";
pub const POINTING_REPORT_FILE: &str = "pointing_scores.json";
/// Suffix of the complementary-pair slice reports.
pub const PAIRS_SUFFIX: &str = "_pairs";
pub const HEATMAP_INDEX_FILE: &str = "heatmaps.json";

fn open_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let root = cfg.require(&cfg.paths.dataset, "dataset")?;
    existing_dir(&root, "dataset")?;
    let features = cfg
        .paths
        .features
        .clone()
        .unwrap_or_else(|| root.join(dataset::FEATURES_DIR));
    existing_dir(&features, "features")?;
    if let Some(v) = &cfg.paths.vocab {
        existing_file(v, "vocabulary")?;
    }
    Ok(Dataset::open_with(
        &root,
        Some(&features),
        cfg.paths.vocab.as_deref(),
        cfg.mode,
    )?)
}

fn split_records<'a>(cfg: &RunConfig, ds: &'a Dataset) -> CliResult<Vec<&'a ExplanationRecord>> {
    let records = ds.split(cfg.split);
    if records.is_empty() {
        return Err(CliError::Validation(format!(
            "dataset {} has no {:?} records",
            ds.root.display(),
            cfg.split
        )));
    }
    Ok(records)
}

/// Layer sizes from the config, or desk defaults sized to the data.
fn model_config(cfg: &RunConfig, ds: &Dataset, first: &ExplanationRecord) -> CliResult<ModelConfig> {
    let v = ds.vocabs()?;
    let sizes = (v.answers.len(), v.questions.len(), v.explanations.len());
    let model = match &cfg.model {
        Some(m) => m.clone(),
        None => {
            let f = ds.features(first, None)?;
            let mut m = ModelConfig::desk(cfg.mode, sizes.0, sizes.1, sizes.2);
            m.feature_channels = f.channels();
            (m.grid_rows, m.grid_cols) = f.grid();
            m
        }
    };
    let want_q = if cfg.mode == TaskMode::Act { 0 } else { sizes.1 };
    if (model.num_answers, model.question_vocab, model.explanation_vocab) != (sizes.0, want_q, sizes.2) {
        return Err(CliError::Validation(format!(
            "model sizes (answers {}, question vocab {}, explanation vocab {}) do not match the vocabulary ({}, {}, {})",
            model.num_answers, model.question_vocab, model.explanation_vocab, sizes.0, want_q, sizes.2
        )));
    }
    model.validate()?;
    Ok(model)
}

fn examples(
    cfg: &RunConfig,
    ds: &Dataset,
    records: &[&ExplanationRecord],
    model: &ModelConfig,
) -> CliResult<Vec<Example>> {
    let mut ex = ds.examples(records, model)?;
    if let Some(k) = cfg.question_max_tokens {
        for e in &mut ex {
            if let Some(q) = &mut e.question {
                q.truncate(k.max(1));
            }
        }
    }
    Ok(ex)
}

fn load_kind(dir: &Path, kind: &str, vocab_hash: &str, mode: TaskMode) -> CliResult<(ParamSet, Manifest)> {
    existing_dir(dir, "checkpoint")?;
    let (params, manifest) = load_checkpoint(dir)?;
    if manifest.kind != kind {
        return Err(CliError::Validation(format!(
            "{} holds a `{}` checkpoint, expected `{kind}`",
            dir.display(),
            manifest.kind
        )));
    }
    manifest.check_vocab(vocab_hash)?;
    if manifest.model.mode != mode {
        return Err(CliError::Validation(format!(
            "checkpoint was trained in {:?} mode, run is in {:?} mode",
            manifest.model.mode, mode
        )));
    }
    Ok((params, manifest))
}

pub fn train_answerer(cfg: &RunConfig) -> CliResult<Value> {
    let out = cfg.output()?;
    let ds = open_dataset(cfg)?;
    let records = split_records(cfg, &ds)?;
    let model = model_config(cfg, &ds, records[0])?;
    let ex = examples(cfg, &ds, &records, &model)?;
    let trained = fit_answerer(&model, &cfg.train, &ex, None)?;
    create_dir(&out)?;
    save_checkpoint(
        &out,
        "answerer",
        &trained.params,
        &model,
        &ds.vocabs()?.fingerprint(),
        Some(&cfg.train),
    )?;
    write_json(&out.join(LOG_FILE), &trained.log)?;
    cfg.write_resolved(&out)?;
    let last = trained.log.last();
    Ok(json!({
        "status": "ok",
        "command": "train-answerer",
        "examples": ex.len(),
        "epochs": trained.log.len(),
        "final_loss": last.map(|l| l.loss),
        "final_accuracy": last.map(|l| l.accuracy),
        "checkpoint": out,
    }))
}

pub fn train_explainer(cfg: &RunConfig) -> CliResult<Value> {
    let out = cfg.output()?;
    let answerer = cfg.require(&cfg.paths.answerer, "answerer")?;
    let ds = open_dataset(cfg)?;
    let hash = ds.vocabs()?.fingerprint();
    let (params, manifest) = load_kind(&answerer, "answerer", &hash, cfg.mode)?;
    let records = split_records(cfg, &ds)?;
    let ex = examples(cfg, &ds, &records, &manifest.model)?;
    let trained = fit_explainer(&manifest.model, &cfg.train, &ex, &params)?;
    create_dir(&out)?;
    save_checkpoint(
        &out,
        "explainer",
        &trained.params,
        &manifest.model,
        &hash,
        Some(&cfg.train),
    )?;
    write_json(&out.join(LOG_FILE), &trained.log)?;
    cfg.write_resolved(&out)?;
    let last = trained.log.last();
    Ok(json!({
        "status": "ok",
        "command": "train-explainer",
        "examples": ex.len(),
        "epochs": trained.log.len(),
        "freeze_answerer": cfg.train.freeze_answerer,
        "final_loss": last.map(|l| l.loss),
        "final_token_accuracy": last.map(|l| l.accuracy),
        "checkpoint": out,
    }))
}

/// First line of `explanations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainHeader {
    pub conditioning: Conditioning,
    pub beam_width: usize,
    pub split: Split,
    pub checkpoint: PathBuf,
    pub vocab_hash: String,
    pub mode: TaskMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainLine {
    pub id: String,
    /// Predicted answer label.
    pub answer: String,
    pub answer_id: usize,
    /// Ground-truth label fed to the explainer in `gt` mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioned_on: Option<String>,
    pub justification: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub terminated: bool,
    /// Pointing map file relative to the output directory.
    pub pointing: String,
}

pub fn explain(cfg: &RunConfig) -> CliResult<Value> {
    let out = cfg.output()?;
    let ckpt = cfg.require(&cfg.paths.checkpoint, "checkpoint")?;
    let ds = open_dataset(cfg)?;
    let v = ds.vocabs()?;
    let hash = v.fingerprint();
    let (params, manifest) = load_kind(&ckpt, "explainer", &hash, cfg.mode)?;
    let model = &manifest.model;
    let records = split_records(cfg, &ds)?;
    // Validate every record before any output is written.
    let mut sources = Vec::with_capacity(records.len());
    for r in &records {
        sources.push(match cfg.conditioning {
            Conditioning::Pred => AnswerSource::Predicted,
            Conditioning::Gt => AnswerSource::OneHot(v.answers.id(&r.answer).ok_or_else(|| {
                CliError::Validation(format!(
                    "record {}: ground-truth answer `{}` is absent from the answer space; gt conditioning needs it",
                    r.id, r.answer
                ))
            })?),
        });
    }
    create_dir(&out.join(POINTING_DIR))?;
    let header = ExplainHeader {
        conditioning: cfg.conditioning,
        beam_width: cfg.beam_width,
        split: cfg.split,
        checkpoint: ckpt.clone(),
        vocab_hash: hash,
        mode: cfg.mode,
    };
    let mut lines = vec![json!({ "header": header }).to_string()];
    for (r, source) in records.iter().zip(sources) {
        let features = ds.features(r, Some(model))?;
        let mut question = ds.question(r, cfg.mode)?;
        if let (Some(q), Some(k)) = (&mut question, cfg.question_max_tokens) {
            q.truncate(k.max(1));
        }
        let e = run_explain(
            &params,
            model,
            features.tensor(),
            question.as_deref(),
            source,
            cfg.beam_width,
        )?;
        e.pointing.check(pjx_core::map::MASS_TOLERANCE)?;
        let file = format!("{POINTING_DIR}/{}.pjxt", r.id);
        e.pointing.to_tensor().save(&out.join(&file))?;
        let words = e.justification.tokens.words();
        let line = ExplainLine {
            id: r.id.clone(),
            answer: v.answers.label(e.predicted_answer).unwrap_or_default().to_string(),
            answer_id: e.predicted_answer,
            conditioned_on: matches!(source, AnswerSource::OneHot(_)).then(|| r.answer.clone()),
            justification: v.explanations.decode(words).join(" "),
            tokens: words.to_vec(),
            log_prob: e.justification.log_prob,
            terminated: e.justification.terminated,
            pointing: file,
        };
        lines.push(serde_json::to_string(&line).expect("line serializes"));
    }
    let path = out.join(EXPLANATIONS_FILE);
    fs::write(&path, lines.join("\n") + "\n")
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    cfg.write_resolved(&out)?;
    Ok(json!({
        "status": "ok",
        "command": "explain",
        "instances": records.len(),
        "conditioning": cfg.conditioning,
        "beam_width": cfg.beam_width,
        "explanations": path,
    }))
}

/// Reads `explanations.jsonl`, skipping the header line.
pub fn read_predictions(path: &Path) -> CliResult<(ExplainHeader, Vec<ExplainLine>)> {
    existing_file(path, "predictions")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).enumerate();
    let bad = |n: usize, e: String| CliError::Validation(format!("{}:{}: {e}", path.display(), n + 1));
    let (_, first) = lines
        .next()
        .ok_or_else(|| CliError::Validation(format!("{} is empty", path.display())))?;
    #[derive(Deserialize)]
    struct Head {
        header: ExplainHeader,
    }
    let head: Head = serde_json::from_str(first).map_err(|e| bad(0, format!("header: {e}")))?;
    let items = lines
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| bad(n, e.to_string())))
        .collect::<CliResult<Vec<ExplainLine>>>()?;
    Ok((head.header, items))
}

/// Errors unless both id sets are equal, listing every id missing on either side.
fn check_alignment<'a>(
    predicted: impl Iterator<Item = &'a str>,
    truth: impl Iterator<Item = &'a str>,
) -> CliResult<()> {
    let p: BTreeSet<&str> = predicted.collect();
    let t: BTreeSet<&str> = truth.collect();
    let mut missing: Vec<String> = t.difference(&p).map(|id| format!("{id} (no prediction)")).collect();
    missing.extend(p.difference(&t).map(|id| format!("{id} (no ground truth)")));
    if !missing.is_empty() {
        return Err(pjx_core::Error::MissingIds(missing).into());
    }
    Ok(())
}

fn filter_metrics(cfg: &RunConfig, mut report: TextReport) -> TextReport {
    let off: Vec<&str> = [
        (!cfg.metrics.bleu4).then_some("BLEU4"),
        (!cfg.metrics.rouge_l).then_some("ROUGEL"),
        (!cfg.metrics.cider).then_some("CIDEr"),
    ]
    .into_iter()
    .flatten()
    .collect();
    report.metrics.retain(|k, _| !off.contains(&k.as_str()));
    report.per_instance.retain(|r| !off.contains(&r.metric.as_str()));
    report
}

pub fn eval_text(cfg: &RunConfig) -> CliResult<Value> {
    let out = cfg.output()?;
    let (corpus, paired) = if let Some(path) = &cfg.paths.corpus {
        existing_file(path, "corpus")?;
        (Corpus::load(path)?, None)
    } else {
        let pred_path = cfg.require(&cfg.paths.predictions, "predictions or corpus")?;
        let (_, preds) = read_predictions(&pred_path)?;
        let ds = open_dataset(cfg)?;
        let records = split_records(cfg, &ds)?;
        check_alignment(
            preds.iter().map(|p| p.id.as_str()),
            records.iter().map(|r| r.id.as_str()),
        )?;
        let by_id: BTreeMap<&str, &ExplanationRecord> = records.iter().map(|r| (r.id.as_str(), *r)).collect();
        let items: Vec<(String, String, Vec<String>)> = preds
            .iter()
            .map(|p| {
                (
                    p.id.clone(),
                    p.justification.clone(),
                    by_id[p.id.as_str()].explanations.clone(),
                )
            })
            .collect();
        let pair_items: Vec<_> = items
            .iter()
            .filter(|(id, _, _)| by_id[id.as_str()].complementary_pair_id.is_some())
            .cloned()
            .collect();
        let paired = if pair_items.len() >= 2 {
            Some(Corpus::from_text(pair_items)?)
        } else {
            None
        };
        (Corpus::from_text(items)?, paired)
    };
    create_dir(&out)?;
    let report = filter_metrics(cfg, score_text(&corpus, &[])?);
    write_json(&out.join(TEXT_REPORT_FILE), &report)?;
    let mut summary = json!({
        "status": "ok",
        "command": "eval-text",
        "n": report.n,
        "metrics": report.metrics.iter().map(|(k, m)| (k.clone(), json!(m.value))).collect::<BTreeMap<_, _>>(),
    });
    if let Some(p) = paired {
        let r = filter_metrics(cfg, score_text(&p, &[])?);
        write_json(&out.join(format!("text_scores{PAIRS_SUFFIX}.json")), &r)?;
        summary["pairs_n"] = json!(r.n);
    }
    cfg.write_resolved(&out)?;
    Ok(summary)
}

fn heatmaps(ds: &Dataset, records: &[&ExplanationRecord]) -> CliResult<BTreeMap<String, GroundTruthHeatmap>> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(h) = ds.heatmap(r)? {
            out.insert(r.id.clone(), h);
        }
    }
    if out.is_empty() {
        return Err(CliError::Validation(
            "no records in the split carry annotator masks".into(),
        ));
    }
    Ok(out)
}

pub fn eval_pointing(cfg: &RunConfig) -> CliResult<Value> {
    let out = cfg.output()?;
    let ds = open_dataset(cfg)?;
    let records = split_records(cfg, &ds)?;
    let gts = heatmaps(&ds, &records)?;
    let preds: BTreeMap<String, AttentionMap> = match (cfg.baseline, &cfg.paths.predictions) {
        (Some(b), _) => gts
            .iter()
            .enumerate()
            .map(|(i, (id, g))| {
                let (r, c) = (g.map.rows(), g.map.cols());
                let m = match b {
                    Baseline::Uniform => baseline_uniform(r, c),
                    Baseline::Random => baseline_random_point(r, c, cfg.seed.wrapping_add(i as u64)),
                };
                (id.clone(), m)
            })
            .collect(),
        (None, Some(path)) => {
            let (_, lines) = read_predictions(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let mut m = BTreeMap::new();
            for l in lines {
                let t = Tensor::load(&base.join(&l.pointing))?;
                m.insert(l.id, AttentionMap::from_tensor(&t)?);
            }
            m
        }
        (None, None) => {
            return Err(CliError::Validation(
                "eval-pointing needs --predictions or --baseline".into(),
            ))
        }
    };
    check_alignment(preds.keys().map(String::as_str), gts.keys().map(String::as_str))?;
    create_dir(&out)?;
    let score = score_pointing(&preds, &gts)?;
    write_json(&out.join(POINTING_REPORT_FILE), &score)?;
    let mut summary = json!({
        "status": "ok",
        "command": "eval-pointing",
        "source": cfg.baseline.map_or("predictions".to_string(), |b| format!("{b:?}").to_lowercase()),
        "n": score.emd.n,
        "emd": score.emd.mean,
        "rank_correlation": score.rank_correlation.mean,
        "rank_correlation_std_error": score.rank_correlation.std_error,
    });
    let paired: BTreeSet<&str> = records
        .iter()
        .filter(|r| r.complementary_pair_id.is_some())
        .map(|r| r.id.as_str())
        .collect();
    if !paired.is_empty() {
        let pick = |m: &BTreeMap<String, AttentionMap>| -> BTreeMap<String, AttentionMap> {
            m.iter()
                .filter(|(k, _)| paired.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        let g: BTreeMap<String, GroundTruthHeatmap> = gts
            .iter()
            .filter(|(k, _)| paired.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if !g.is_empty() {
            let s = score_pointing(&pick(&preds), &g)?;
            write_json(&out.join(format!("pointing_scores{PAIRS_SUFFIX}.json")), &s)?;
            summary["pairs_n"] = json!(s.emd.n);
        }
    }
    cfg.write_resolved(&out)?;
    Ok(summary)
}

pub fn build_vocab(cfg: &RunConfig) -> CliResult<Value> {
    let out = cfg.output()?;
    let root = cfg.require(&cfg.paths.dataset, "dataset")?;
    existing_dir(&root, "dataset")?;
    let records = dataset::load_records_strict(&root.join(dataset::RECORDS_FILE), cfg.mode)?;
    let v = dataset::build_vocab(&records, cfg.vocab)?;
    create_dir(&out)?;
    let path = out.join(dataset::VOCAB_FILE);
    fs::write(&path, v.to_json() + "\n").map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    cfg.write_resolved(&out)?;
    Ok(json!({
        "status": "ok",
        "command": "build-vocab",
        "answers": v.answers.len(),
        "question_words": v.questions.len(),
        "explanation_words": v.explanations.len(),
        "fingerprint": v.fingerprint(),
        "vocab": path,
    }))
}

#[derive(Serialize)]
struct HeatmapEntry {
    id: String,
    file: String,
    annotators: usize,
}

pub fn aggregate_annotations(cfg: &RunConfig) -> CliResult<Value> {
    let out = cfg.output()?;
    let root = cfg.require(&cfg.paths.dataset, "dataset")?;
    existing_dir(&root, "dataset")?;
    let records = dataset::load_records_strict(&root.join(dataset::RECORDS_FILE), cfg.mode)?;
    create_dir(&out)?;
    let mut index = Vec::new();
    for r in &records {
        let Some(paths) = &r.masks else { continue };
        let masks = paths
            .iter()
            .map(|p| Tensor::load(&root.join(p)))
            .collect::<pjx_core::Result<Vec<_>>>()?;
        let h = aggregate_masks(&masks)?;
        let file = format!("{}.pjxt", r.id);
        h.map.to_tensor().save(&out.join(&file))?;
        index.push(HeatmapEntry {
            id: r.id.clone(),
            file,
            annotators: h.annotators,
        });
    }
    write_json(&out.join(HEATMAP_INDEX_FILE), &index)?;
    cfg.write_resolved(&out)?;
    Ok(json!({
        "status": "ok",
        "command": "aggregate-annotations",
        "heatmaps": index.len(),
        "index": out.join(HEATMAP_INDEX_FILE),
    }))
}

pub fn synth_dataset(cfg: &RunConfig) -> CliResult<Value> {
    let out = cfg.output()?;
    let corpus = dataset::synth_dataset(&cfg.synth, cfg.seed)?;
    let v = corpus.write(&out, cfg.vocab)?;
    cfg.write_resolved(&out)?;
    Ok(json!({
        "status": "ok",
        "command": "synth-dataset",
        "records": corpus.records.len(),
        "answers": v.answers.len(),
        "explanation_words": v.explanations.len(),
        "dataset": out,
    }))
}
