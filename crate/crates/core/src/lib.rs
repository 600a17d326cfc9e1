//! Pointing-and-justification explanation models at desk scale.
//!
//! The crate provides a small reverse-mode tensor engine ([`graph`]), the
//! answering and explanation models built on it, their training loops, and
//! the metrics used to score pointing maps and textual justifications.

pub mod answering;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod explainer;
pub mod gradcheck;
pub mod graph;
pub mod lstm;
pub mod map;
pub mod params;
pub mod pointing;
pub mod report;
pub mod tensor;
pub mod text_metrics;
pub mod training;
pub mod vocab;

pub use config::{ModelConfig, TaskMode};
pub use error::{Error, Result};
pub use explainer::{Conditioning, JustificationTokens};
pub use graph::{Graph, Var};
pub use map::{AttentionMap, GroundTruthHeatmap};
pub use params::{ParamSet, Session};
pub use pointing::PointingScore;
pub use report::ScoreReport;
pub use tensor::Tensor;
pub use training::{Example, TrainConfig};
