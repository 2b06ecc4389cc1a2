//! Newline-delimited JSON metrics and trace streams.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::trainer::StepMetrics;

/// One record per training step, append-only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub task_loss: f64,
    pub skip_loss: f64,
    pub rho_t: f64,
    pub per_layer_rho: Vec<f64>,
    pub activation_counts: Vec<usize>,
    pub mean_similarity: Vec<f64>,
    /// Wall time of the step; excluded from determinism comparisons.
    pub wall_time_ms: f64,
}

impl MetricsRecord {
    pub fn new(m: StepMetrics, wall_time_ms: f64) -> Self {
        MetricsRecord {
            step: m.step,
            task_loss: m.task_loss,
            skip_loss: m.skip_loss,
            rho_t: m.rho_t,
            per_layer_rho: m.per_layer_rho,
            activation_counts: m.activation_counts,
            mean_similarity: m.mean_similarity,
            wall_time_ms,
        }
    }

    /// The deterministic part of the record, for stream comparison.
    pub fn deterministic_key(&self) -> (u64, String, String, String) {
        (
            self.step,
            format!("{:.17e}/{:.17e}/{:.17e}", self.task_loss, self.skip_loss, self.rho_t),
            format!("{:?}", self.per_layer_rho),
            format!("{:?}/{:?}", self.activation_counts, self.mean_similarity),
        )
    }
}

/// One record per (batch, layer) from `trace` export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub batch: usize,
    pub layer: usize,
    pub activation_count: usize,
    pub valid_tokens: usize,
    pub mean_similarity: f64,
    /// Per-token activation map of the batch's first sequence.
    pub sample_activations: Vec<bool>,
}

pub struct JsonlWriter {
    out: BufWriter<File>,
    path: String,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| DloError::io(path.display().to_string(), e))?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
            path: path.display().to_string(),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| DloError::Format(format!("metrics encode failed: {e}")))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| DloError::io(self.path.clone(), e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| DloError::io(path.display().to_string(), e))?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| DloError::Format(format!("bad metrics line: {e}")))
        })
        .collect()
}
