//! `pjx` command-line front end.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pjx_core::dataset::Split;
use pjx_core::{Conditioning, TaskMode};

use config::{Baseline, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "pjx",
    version,
    about = "Train, run and evaluate pointing-and-justification explanation models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `vqa` or `act`.
    #[arg(long)]
    pub mode: Option<TaskMode>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `train`, `val` or `test`.
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the answering model.
    TrainAnswerer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the explanation model on top of an answering checkpoint.
    TrainExplainer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Answering-model checkpoint directory.
        #[arg(long)]
        answerer: Option<PathBuf>,
        /// Keep every answering-model tensor fixed.
        #[arg(long)]
        freeze_answerer: bool,
        /// `gt` or `pred`.
        #[arg(long)]
        conditioning: Option<Conditioning>,
        /// Also optimize the answer loss.
        #[arg(long)]
        joint: bool,
    },
    /// Generate answers, justifications and pointing maps.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Explainer checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        conditioning: Option<Conditioning>,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Score justifications with BLEU-4, ROUGE-L and CIDEr.
    EvalText {
        #[command(flatten)]
        common: Common,
        /// `explanations.jsonl` from `explain`, scored against the dataset.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Stand-alone corpus of `{id, candidate, references}` lines.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score pointing maps with EMD and rank correlation.
    EvalPointing {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Score a baseline instead of predictions.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Build `vocab.json` from the training split.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        min_count: Option<usize>,
    },
    /// Aggregate annotator masks into ground-truth heatmaps.
    AggregateAnnotations {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic dataset.
    SynthDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
    },
}

impl Common {
    fn apply(&self) -> CliResult<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(d) = &self.dataset {
            c.paths.dataset = Some(d.clone());
        }
        if let Some(o) = &self.out {
            c.paths.output = Some(o.clone());
        }
        if let Some(s) = self.split {
            c.split = s;
        }
        Ok(c)
    }
}

impl TrainArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            c.train.learning_rate = lr;
        }
    }
}

/// Builds the resolved configuration for a command.
pub fn resolve(command: &Command) -> CliResult<RunConfig> {
    let c = match command {
        Command::TrainAnswerer { common, train } => {
            let mut c = common.apply()?;
            train.apply(&mut c);
            c
        }
        Command::TrainExplainer {
            common,
            train,
            answerer,
            freeze_answerer,
            conditioning,
            joint,
        } => {
            let mut c = common.apply()?;
            train.apply(&mut c);
            if let Some(a) = answerer {
                c.paths.answerer = Some(a.clone());
            }
            if *freeze_answerer {
                c.train.freeze_answerer = true;
            }
            if *joint {
                c.train.joint = true;
            }
            if let Some(k) = conditioning {
                c.conditioning = *k;
            }
            c
        }
        Command::Explain {
            common,
            checkpoint,
            conditioning,
            beam_width,
        } => {
            let mut c = common.apply()?;
            if let Some(p) = checkpoint {
                c.paths.checkpoint = Some(p.clone());
            }
            if let Some(k) = conditioning {
                c.conditioning = *k;
            }
            if let Some(b) = beam_width {
                c.beam_width = *b;
            }
            c
        }
        Command::EvalText {
            common,
            predictions,
            corpus,
        } => {
            let mut c = common.apply()?;
            if let Some(p) = predictions {
                c.paths.predictions = Some(p.clone());
            }
            if let Some(p) = corpus {
                c.paths.corpus = Some(p.clone());
            }
            c
        }
        Command::EvalPointing {
            common,
            predictions,
            baseline,
        } => {
            let mut c = common.apply()?;
            if let Some(p) = predictions {
                c.paths.predictions = Some(p.clone());
            }
            if baseline.is_some() {
                c.baseline = *baseline;
            }
            c
        }
        Command::BuildVocab {
            common,
            top_k,
            min_count,
        } => {
            let mut c = common.apply()?;
            if let Some(k) = top_k {
                c.vocab.top_k_answers = *k;
            }
            if let Some(m) = min_count {
                c.vocab.min_count = *m;
            }
            c
        }
        Command::AggregateAnnotations { common } => common.apply()?,
        Command::SynthDataset { common, train, val } => {
            let mut c = common.apply()?;
            if let Some(n) = train {
                c.synth.train = *n;
            }
            if let Some(n) = val {
                c.synth.val = *n;
            }
            c
        }
    };
    c.resolve()
}

/// Runs one parsed command and returns its stdout summary.
pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = resolve(&cli.command)?;
    let summary = match &cli.command {
        Command::TrainAnswerer { .. } => commands::train_answerer(&cfg)?,
        Command::TrainExplainer { .. } => commands::train_explainer(&cfg)?,
        Command::Explain { .. } => commands::explain(&cfg)?,
        Command::EvalText { .. } => commands::eval_text(&cfg)?,
        Command::EvalPointing { .. } => commands::eval_pointing(&cfg)?,
        Command::BuildVocab { .. } => commands::build_vocab(&cfg)?,
        Command::AggregateAnnotations { .. } => commands::aggregate_annotations(&cfg)?,
        Command::SynthDataset { .. } => commands::synth_dataset(&cfg)?,
    };
    Ok(summary.to_string())
}
