//! Score report shared by the pointing and text evaluators.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointing::mean_and_std_error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceValue {
    pub id: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
    pub excluded_count: usize,
    pub per_instance: Vec<InstanceValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl ScoreReport {
    pub fn from_values(metric: &str, values: Vec<(String, f64)>, excluded_count: usize) -> Self {
        let raw: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
        let (mean, std_error) = mean_and_std_error(&raw);
        let notes = match raw.len() {
            0 => Some("no scorable instances".to_string()),
            1 => Some("single instance: std_error reported as 0".to_string()),
            _ => None,
        };
        ScoreReport {
            metric: metric.to_string(),
            n: raw.len(),
            mean,
            std_error,
            excluded_count,
            per_instance: values
                .into_iter()
                .map(|(id, value)| InstanceValue { id, value })
                .collect(),
            notes,
        }
    }
}

/// Writes any serializable report as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
