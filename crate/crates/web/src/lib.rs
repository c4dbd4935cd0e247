//! Browser playground. Every export returns a JSON string; failures come back
//! as `{"error": "..."}` so the page never has to catch exceptions.

use hybridkv::harness::{gen_trace, run_pipeline, AttentionMode, OutlierSpec, PipelineConfig, SyntheticSpec};
use hybridkv::identifier::LayerLabel;
use hybridkv::kv_model::{attention_weights, ModelConfig};
use hybridkv::memsim::{build_timeline, hybrid_footprint, simulate, FootprintParams, FootprintRow, LinkModel};
use hybridkv::memsim::{SimulationReport, TimelineEvent};
use hybridkv::quantizer::{dequantize_group, pack_bits, quant_params, quantize_group};
use hybridkv::retriever::{exact_topk, RetrievalConfig};
use hybridkv::{KvError, Result};
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

#[derive(Debug, Serialize)]
pub struct GroupView {
    pub zero: f64,
    pub scale: f64,
    pub values: Vec<f64>,
    pub codes: Vec<u8>,
    pub dequantized: Vec<f64>,
    pub max_error: f64,
    pub bound: f64,
}

#[derive(Debug, Serialize)]
pub struct QuantizeView {
    pub bits: u8,
    pub groups: Vec<GroupView>,
    /// Packed codes, LSB first.
    pub packed_hex: String,
    pub storage_bytes: usize,
    pub fp16_bytes: usize,
}

fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| KvError::Parameter(format!("`{s}` is not a finite number")))
        })
        .collect()
}

/// Quantizes a list of numbers in consecutive groups of `group_size`.
pub fn quantize(text: &str, bits: u8, group_size: usize) -> Result<QuantizeView> {
    let values = parse_numbers(text)?;
    if values.is_empty() {
        return Err(KvError::EmptyInput("values"));
    }
    if group_size == 0 {
        return Err(KvError::Parameter("group size must be at least 1".into()));
    }
    let mut groups = Vec::new();
    let mut all_codes = Vec::new();
    for chunk in values.chunks(group_size) {
        let p = quant_params(chunk, bits)?;
        let codes = quantize_group(chunk, &p)?;
        let dequantized = dequantize_group(&codes, &p)?;
        let max_error = chunk.iter().zip(&dequantized).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        all_codes.extend_from_slice(&codes);
        groups.push(GroupView {
            zero: p.zero,
            scale: p.scale,
            values: chunk.to_vec(),
            codes,
            dequantized,
            max_error,
            bound: p.scale / 2.0,
        });
    }
    let packed = pack_bits(&all_codes, bits)?;
    let packed_hex = packed.iter().map(|b| format!("{b:02x}")).collect();
    Ok(QuantizeView {
        bits,
        storage_bytes: packed.len() + groups.len() * 4,
        fp16_bytes: values.len() * 2,
        packed_hex,
        groups,
    })
}

#[derive(Debug, Serialize)]
pub struct RetrievalView {
    pub seq_len: usize,
    /// Exact attention of the first query head over every token.
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
    pub exact_topk: Vec<usize>,
    pub planted: usize,
    pub critical_channels: Vec<usize>,
    pub recall: f64,
    pub selected_mass: f64,
    pub cosine: f64,
    pub fetch_bytes: usize,
}

/// One sparse layer with a single KV head, retrieved at the first decode step.
pub fn retrieve(
    seed: u64,
    prefill_len: usize,
    mass: f64,
    n_topk: usize,
    n_local: usize,
    critical_channels: usize,
) -> Result<RetrievalView> {
    let model = ModelConfig::new(1, 2, 1, 32)?;
    let planted = 4;
    let spec = SyntheticSpec {
        model,
        prefill_len,
        decode_steps: 1,
        prefill_query_rows: prefill_len.min(32),
        layers: vec![AttentionMode::Sparse { num_dominant: planted, mass }],
        outliers: OutlierSpec { num_channels: 8, magnitude_ratio: 0.95, drift: false },
        seed,
    };
    let trace = gen_trace(&spec)?;
    let cfg = PipelineConfig {
        q_layers: Some(Vec::new()),
        retrieval: RetrievalConfig { n_local, n_topk, critical_channels },
        ..PipelineConfig::hybrid_1()
    };
    let report = run_pipeline(&trace, &cfg)?;
    let step = &report.steps[0];
    let cache = trace.cache_after(0, 1)?;
    let weights = attention_weights(&trace.steps[0][0].queries[0], &cache.heads[0].keys)?;
    Ok(RetrievalView {
        seq_len: weights.len(),
        exact_topk: exact_topk(&weights, n_topk.min(weights.len())),
        weights,
        selected: step.selected[0].clone(),
        planted,
        critical_channels: step.critical_channels[0].clone(),
        recall: step.recall.unwrap_or(1.0),
        selected_mass: step.selected_mass.unwrap_or(1.0),
        cosine: step.cosine,
        fetch_bytes: step.fetch_bytes,
    })
}

#[derive(Debug, Serialize)]
pub struct TimelineView {
    pub events: Vec<TimelineEvent>,
    pub summary: SimulationReport,
    pub footprint: Vec<FootprintRow>,
}

fn parse_labels(s: &str) -> Result<Vec<LayerLabel>> {
    let labels: Vec<LayerLabel> = s
        .trim()
        .chars()
        .map(|c| match c.to_ascii_uppercase() {
            'Q' => Ok(LayerLabel::QuantizationFriendly),
            'S' => Ok(LayerLabel::SparsityFriendly),
            _ => Err(KvError::Config(format!("label `{c}` is not Q or S"))),
        })
        .collect::<Result<_>>()?;
    if labels.is_empty() {
        return Err(KvError::Config("no layer labels".into()));
    }
    Ok(labels)
}

/// One decode step of a 32-query-head, 8-KV-head, 128-wide model laid out
/// by `labels` (e.g. `QSSS`), plus its device footprint.
pub fn timeline(labels: &str, seq_len: usize, link_gbps: f64, bits: u8) -> Result<TimelineView> {
    let labels = parse_labels(labels)?;
    let model = ModelConfig::new(labels.len(), 32, 8, 128)?;
    if !link_gbps.is_finite() {
        return Err(KvError::Config(format!("link bandwidth {link_gbps} GB/s")));
    }
    let cfg = PipelineConfig {
        bits,
        link: LinkModel::new(link_gbps * 1e9, LinkModel::pcie_4gbps().base_latency)?,
        ..PipelineConfig::hybrid_1()
    };
    cfg.validate(&model)?;
    let costs = labels
        .iter()
        .map(|&l| cfg.cost.layer_costs(&model, l, seq_len, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let (t, summary) = simulate(&build_timeline(&costs, &cfg.link, 1)?)?;
    let p = FootprintParams {
        num_layers: labels.len() as u64,
        seq_len: seq_len as u64,
        num_kv_heads: model.num_kv_heads as u64,
        head_dim: model.head_dim as u64,
        element_bytes: model.element_bytes as u64,
        bits: Some(bits as u64),
        group_size: Some(cfg.group_size as u64),
        critical_channels: Some(cfg.retrieval.critical_channels as u64),
        ..FootprintParams::default()
    };
    let footprint = hybrid_footprint(&labels, &p, cfg.retrieval.n_local as u64)?;
    Ok(TimelineView { events: t.events, summary, footprint })
}

fn to_json<T: Serialize>(r: Result<T>) -> String {
    let v = r.map_err(|e| e.to_string()).and_then(|v| serde_json::to_value(v).map_err(|e| e.to_string()));
    match v {
        Ok(v) => v.to_string(),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[wasm_bindgen(js_name = quantize)]
pub fn quantize_js(values: &str, bits: u8, group_size: usize) -> String {
    to_json(quantize(values, bits, group_size))
}

#[wasm_bindgen(js_name = retrieve)]
pub fn retrieve_js(seed: u32, prefill_len: usize, mass: f64, n_topk: usize, n_local: usize, critical_channels: usize) -> String {
    to_json(retrieve(seed as u64, prefill_len, mass, n_topk, n_local, critical_channels))
}

#[wasm_bindgen(js_name = timeline)]
pub fn timeline_js(labels: &str, seq_len: usize, link_gbps: f64, bits: u8) -> String {
    to_json(timeline(labels, seq_len, link_gbps, bits))
}
