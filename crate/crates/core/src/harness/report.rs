//! Run report and its JSON/CSV emitters.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::PipelineConfig;
use crate::error::{KvError, Result};
use crate::identifier::LayerLabel;
use crate::kv_model::ModelConfig;
use crate::memsim::{write_footprint_csv, FootprintRow, LayerCosts, LinkModel, SimulationReport};

/// Bumped whenever a report field changes meaning or shape.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Calibration,
    Config,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub label: LayerLabel,
    /// Dense preference score from calibration, reported even when the label
    /// comes from elsewhere.
    pub score: f64,
    pub per_head_scores: Vec<f64>,
    pub per_head_sparse_error: Vec<f64>,
}

/// Metrics of one layer at one decode step. Retrieval fields are `None` for
/// quantized layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub layer: usize,
    pub label: LayerLabel,
    /// Mean over KV heads of recall@n_topk against the exact ranking.
    pub recall: Option<f64>,
    /// Smallest exact attention mass on the selected tokens over query heads.
    pub selected_mass: Option<f64>,
    /// Smallest cosine similarity to exact attention over query heads.
    pub cosine: f64,
    pub max_abs_error: f64,
    /// Critical channels per KV head.
    pub critical_channels: Vec<Vec<usize>>,
    /// Selected token indices per KV head.
    pub selected: Vec<Vec<usize>>,
    pub prefetch_bytes: usize,
    pub fetch_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub min_cosine: f64,
    pub mean_cosine: f64,
    pub max_abs_error: f64,
    pub mean_recall: Option<f64>,
    pub min_selected_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationStats {
    pub layer: usize,
    pub bits: u8,
    pub group_size: usize,
    pub storage_bytes: usize,
    pub fp16_bytes: usize,
    pub key_max_abs_error: f64,
    pub key_mean_abs_error: f64,
    pub value_max_abs_error: f64,
    pub value_mean_abs_error: f64,
    /// Elements whose round-trip error exceeds half their group step.
    pub bound_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSummary {
    pub link: LinkModel,
    /// Sequence length the per-layer costs were evaluated at.
    pub seq_len: usize,
    pub costs: Vec<LayerCosts>,
    pub simulation: SimulationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub model: ModelConfig,
    pub prefill_len: usize,
    pub decode_steps: usize,
    pub label_source: LabelSource,
    pub layers: Vec<LayerReport>,
    pub steps: Vec<StepRecord>,
    pub fidelity: FidelitySummary,
    pub quantization: Vec<QuantizationStats>,
    pub footprint: Vec<FootprintRow>,
    pub timeline: TimelineSummary,
}

impl RunReport {
    pub fn labels(&self) -> Vec<LayerLabel> {
        self.layers.iter().map(|l| l.label).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        let r: RunReport = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(KvError::Parameter(format!(
                "report schema {} (this build reads {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// Writes the report into `dir` and returns the files written.
///
/// JSON: `report.json`. CSV: `recall.csv` (one row per layer and step),
/// `layers.csv`, `footprint.csv`, `quantization.csv`.
pub fn emit_report(report: &RunReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Json) {
        let p = dir.join("report.json");
        let mut text = report.to_json()?;
        text.push('\n');
        std::fs::write(&p, text)?;
        written.push(p);
    }
    if formats.contains(&ReportFormat::Csv) {
        let p = dir.join("recall.csv");
        let mut w = csv_writer(&p)?;
        w.write_record(["step", "layer", "label", "recall", "selected_mass", "cosine", "max_abs_error"])?;
        for s in &report.steps {
            w.write_record([
                s.step.to_string(),
                s.layer.to_string(),
                s.label.short().to_string(),
                opt(s.recall),
                opt(s.selected_mass),
                s.cosine.to_string(),
                s.max_abs_error.to_string(),
            ])?;
        }
        w.flush()?;
        written.push(p);

        let p = dir.join("layers.csv");
        let mut w = csv_writer(&p)?;
        w.write_record(["layer", "label", "score"])?;
        for l in &report.layers {
            w.write_record([l.layer.to_string(), l.label.short().to_string(), l.score.to_string()])?;
        }
        w.flush()?;
        written.push(p);

        let p = dir.join("footprint.csv");
        write_footprint_csv(&report.footprint, BufWriter::new(File::create(&p)?))?;
        written.push(p);

        let p = dir.join("quantization.csv");
        let mut w = csv_writer(&p)?;
        w.write_record([
            "layer",
            "bits",
            "group_size",
            "storage_bytes",
            "fp16_bytes",
            "key_max_abs_error",
            "key_mean_abs_error",
            "value_max_abs_error",
            "value_mean_abs_error",
            "bound_violations",
        ])?;
        for q in &report.quantization {
            w.write_record([
                q.layer.to_string(),
                q.bits.to_string(),
                q.group_size.to_string(),
                q.storage_bytes.to_string(),
                q.fp16_bytes.to_string(),
                q.key_max_abs_error.to_string(),
                q.key_mean_abs_error.to_string(),
                q.value_max_abs_error.to_string(),
                q.value_mean_abs_error.to_string(),
                q.bound_violations.to_string(),
            ])?;
        }
        w.flush()?;
        written.push(p);
    }
    Ok(written)
}
