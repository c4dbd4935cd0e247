//! End-to-end run over a trace: calibrate, compress each layer by its label,
//! replay the decode steps and score everything against exact attention.

use serde::{Deserialize, Serialize};

use super::report::{
    FidelitySummary, LabelSource, LayerReport, QuantizationStats, RunReport, StepRecord, TimelineSummary,
    SCHEMA_VERSION,
};
use super::trace::Trace;
use crate::error::{KvError, Result};
use crate::identifier::{calibrate, CalibrationLayer, LayerLabel, SparsityProbe};
use crate::kv_model::{
    attention_logits, attention_weights, cosine_similarity, exact_attention, max_abs_diff, HeadCache, LayerKV,
    Matrix, ModelConfig, ELEMENT_BYTES,
};
use crate::memsim::{
    build_timeline, hybrid_footprint, memory_footprint, simulate, DeviceBuffers, FootprintMethod, FootprintParams,
    HostPool, LayerCosts, LinkModel,
};
use crate::quantizer::{quantize_layer_kv, QuantizedLayer};
use crate::retriever::{
    exact_topk, group_channel_scores, group_query, project_queries, recall_at_k, select_critical_channels,
    select_topk_tokens, selected_mass, CriticalChannelSet, RetrievalConfig,
};

/// Synthetic per-kernel durations: bytes touched over device bandwidth plus a
/// fixed launch cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Bytes per second.
    pub device_bandwidth: f64,
    /// Seconds per kernel.
    pub launch_overhead: f64,
    /// FFN width as a multiple of the hidden width.
    pub ffn_multiplier: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { device_bandwidth: 900e9, launch_overhead: 5e-6, ffn_multiplier: 3.5 }
    }
}

impl CostModel {
    fn kernel(&self, bytes: usize) -> f64 {
        self.launch_overhead + bytes as f64 / self.device_bandwidth
    }

    /// Durations and transfer sizes of one layer holding `seq_len` tokens.
    pub fn layer_costs(&self, model: &ModelConfig, label: LayerLabel, seq_len: usize, cfg: &PipelineConfig) -> Result<LayerCosts> {
        let eb = ELEMENT_BYTES;
        let d = model.hidden_dim();
        let kv_dim = model.num_kv_heads * model.head_dim;
        let ffn = (self.ffn_multiplier * d as f64).round() as usize;
        let r = &cfg.retrieval;
        let mut c = LayerCosts {
            label,
            qkv: self.kernel((d * d + 2 * d * kv_dim) * eb),
            attention: 0.0,
            ffn: self.kernel(3 * d * ffn * eb),
            estimate: 0.0,
            approx_score: 0.0,
            critical_key_bytes: 0,
            topk_bytes: 0,
        };
        match label {
            LayerLabel::QuantizationFriendly => {
                let bytes = if cfg.bits == 16 {
                    2 * seq_len * kv_dim * eb
                } else {
                    let p = FootprintParams {
                        num_layers: 1,
                        seq_len: seq_len as u64,
                        num_kv_heads: model.num_kv_heads as u64,
                        head_dim: model.head_dim as u64,
                        element_bytes: eb as u64,
                        quant_layers: Some(1),
                        group_size: Some(cfg.group_size as u64),
                        bits: Some(cfg.bits as u64),
                        ..Default::default()
                    };
                    memory_footprint(FootprintMethod::QuantLayers, &p)? as usize
                };
                c.attention = self.kernel(bytes);
            }
            LayerLabel::SparsityFriendly => {
                let local = r.n_local.min(seq_len);
                let topk = r.n_topk.min(seq_len - local);
                c.estimate = self.kernel(d * d * eb);
                c.critical_key_bytes = seq_len * r.critical_channels * model.num_kv_heads * eb;
                c.approx_score = self.kernel(c.critical_key_bytes);
                c.topk_bytes = 2 * topk * kv_dim * eb;
                c.attention = self.kernel(2 * (topk + local) * kv_dim * eb);
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tau: f64,
    /// Trailing prompt queries used for calibration.
    pub n_q: usize,
    /// Top-k used by calibration; `None` is 5% of the prompt.
    pub calib_k: Option<usize>,
    /// 1 or 2 for quantized layers; 16 keeps them uncompressed.
    pub bits: u8,
    pub group_size: usize,
    pub retrieval: RetrievalConfig,
    /// Forces the quantized layer set; otherwise trace labels or calibration decide.
    pub q_layers: Option<Vec<usize>>,
    pub link: LinkModel,
    pub cost: CostModel,
}

impl PipelineConfig {
    /// 1-bit quantized layers.
    pub fn hybrid_1() -> Self {
        PipelineConfig {
            tau: 0.2,
            n_q: 32,
            calib_k: None,
            bits: 1,
            group_size: 64,
            retrieval: RetrievalConfig { n_local: 64, n_topk: 128, critical_channels: 8 },
            q_layers: None,
            link: LinkModel::pcie_4gbps(),
            cost: CostModel::default(),
        }
    }

    /// 2-bit quantized layers.
    pub fn hybrid_2() -> Self {
        PipelineConfig { bits: 2, ..PipelineConfig::hybrid_1() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "hybrid-1" => Ok(PipelineConfig::hybrid_1()),
            "hybrid-2" => Ok(PipelineConfig::hybrid_2()),
            _ => Err(KvError::Config(format!("unknown preset `{name}` (expected hybrid-1 or hybrid-2)"))),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(KvError::Config(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.n_q == 0 {
            return bad("n_q must be at least 1".into());
        }
        if self.calib_k == Some(0) {
            return bad("calibration k must be at least 1".into());
        }
        if !matches!(self.bits, 1 | 2 | 16) {
            return bad(format!("bits must be 1, 2 or 16, got {}", self.bits));
        }
        if self.group_size == 0 {
            return bad("group_size must be at least 1".into());
        }
        self.retrieval.validate(model.head_dim)?;
        if let Some(q) = &self.q_layers {
            if let Some(&l) = q.iter().find(|&&l| l >= model.num_layers) {
                return bad(format!("q layer {l} outside a {}-layer model", model.num_layers));
            }
        }
        let link = LinkModel::new(self.link.bandwidth, self.link.base_latency)?;
        if !link.bandwidth.is_finite() || !link.base_latency.is_finite() {
            return bad("link parameters must be finite".into());
        }
        let c = &self.cost;
        if !(c.device_bandwidth > 0.0 && c.device_bandwidth.is_finite())
            || !(c.launch_overhead >= 0.0 && c.launch_overhead.is_finite())
            || !(c.ffn_multiplier >= 0.0 && c.ffn_multiplier.is_finite())
        {
            return bad("cost model parameters must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn probe(&self) -> SparsityProbe {
        SparsityProbe { k: self.calib_k, n_q: self.n_q, tau: self.tau }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::hybrid_1()
    }
}

enum LayerStore {
    Quantized(QuantizedLayer),
    Full(LayerKV),
    Offloaded,
}

struct Fidelity {
    cosine: f64,
    max_abs: f64,
}

fn compare(out: &[f64], exact: &[f64], acc: &mut Fidelity) {
    acc.cosine = acc.cosine.min(cosine_similarity(out, exact));
    acc.max_abs = acc.max_abs.max(max_abs_diff(out, exact));
}

/// Issues the critical-key prefetch of offloaded layer `layer`, estimating its
/// queries from `hidden`.
fn stage_one(
    trace: &Trace,
    pool: &HostPool,
    buffers: &mut DeviceBuffers,
    layer: usize,
    hidden: &[f64],
    cfg: &PipelineConfig,
) -> Result<usize> {
    let model = trace.model();
    let q_hat = project_queries(model, &trace.layers[layer].w_q, hidden)?;
    let sets: Vec<CriticalChannelSet> = (0..model.num_kv_heads)
        .map(|kv| {
            let scores = group_channel_scores(&q_hat[model.query_heads_of(kv)], pool.channel_max(layer, kv)?);
            select_critical_channels(&scores, cfg.retrieval.critical_channels)
        })
        .collect::<Result<_>>()?;
    let t = buffers.prefetch_critical_keys(pool, layer, &sets, pool.seq_len(layer)?, &cfg.link)?;
    Ok(t.bytes)
}

/// Labels from the config's Q set, else the trace header, else calibration.
pub fn resolve_labels(
    trace: &Trace,
    cfg: &PipelineConfig,
    calibrated: &[LayerLabel],
) -> (Vec<LayerLabel>, LabelSource) {
    let l = trace.model().num_layers;
    if let Some(q) = &cfg.q_layers {
        let labels = (0..l)
            .map(|i| if q.contains(&i) { LayerLabel::QuantizationFriendly } else { LayerLabel::SparsityFriendly })
            .collect();
        (labels, LabelSource::Config)
    } else if let Some(labels) = &trace.header.labels {
        (labels.clone(), LabelSource::Trace)
    } else {
        (calibrated.to_vec(), LabelSource::Calibration)
    }
}

pub fn run_pipeline(trace: &Trace, cfg: &PipelineConfig) -> Result<RunReport> {
    let model = *trace.model();
    cfg.validate(&model)?;
    let calib_layers: Vec<CalibrationLayer<'_>> = trace
        .layers
        .iter()
        .map(|l| CalibrationLayer { cache: &l.prefill, queries: &l.prefill_queries })
        .collect();
    let profiles = calibrate(&model, &calib_layers, &cfg.probe())?;
    let calibrated: Vec<LayerLabel> = profiles.iter().map(|p| p.label).collect();
    let (labels, label_source) = resolve_labels(trace, cfg, &calibrated);
    let is_sparse = |l: usize| labels.get(l) == Some(&LayerLabel::SparsityFriendly);

    let mut exact: Vec<LayerKV> = trace.layers.iter().map(|l| l.prefill.clone()).collect();
    let mut pool = HostPool::new();
    let mut stores = Vec::with_capacity(model.num_layers);
    for (l, layer) in trace.layers.iter().enumerate() {
        stores.push(match labels[l] {
            LayerLabel::QuantizationFriendly if cfg.bits == 16 => LayerStore::Full(layer.prefill.clone()),
            LayerLabel::QuantizationFriendly => {
                LayerStore::Quantized(quantize_layer_kv(&layer.prefill, cfg.bits, cfg.group_size)?)
            }
            LayerLabel::SparsityFriendly => {
                pool.offload_layer(l, &layer.prefill)?;
                LayerStore::Offloaded
            }
        });
    }

    let mut buffers = DeviceBuffers::new();
    let mut records = Vec::with_capacity(trace.steps.len() * model.num_layers);
    for (t, step) in trace.steps.iter().enumerate() {
        let mut pending_prefetch = vec![0usize; model.num_layers];
        if is_sparse(0) {
            pending_prefetch[0] = stage_one(trace, &pool, &mut buffers, 0, &step[0].hidden_state, cfg)?;
        }
        for (l, io) in step.iter().enumerate() {
            if is_sparse(l + 1) {
                pending_prefetch[l + 1] = stage_one(trace, &pool, &mut buffers, l + 1, &io.hidden_state, cfg)?;
            }
            exact[l].append(&io.new_keys, &io.new_values)?;
            let exact_out: Vec<Vec<f64>> = io
                .queries
                .iter()
                .enumerate()
                .map(|(qh, q)| exact_attention(q, &exact[l].heads[model.kv_head_of(qh)]))
                .collect::<Result<_>>()?;
            let mut fid = Fidelity { cosine: f64::INFINITY, max_abs: 0.0 };
            let mut record = StepRecord {
                step: t,
                layer: l,
                label: labels[l],
                recall: None,
                selected_mass: None,
                cosine: 0.0,
                max_abs_error: 0.0,
                critical_channels: Vec::new(),
                selected: Vec::new(),
                prefetch_bytes: 0,
                fetch_bytes: 0,
            };
            match &mut stores[l] {
                LayerStore::Quantized(q) => {
                    q.append(&io.new_keys, &io.new_values)?;
                    for (qh, query) in io.queries.iter().enumerate() {
                        let out = q.heads[model.kv_head_of(qh)].attention(query)?;
                        compare(&out, &exact_out[qh], &mut fid);
                    }
                }
                LayerStore::Full(kv) => {
                    kv.append(&io.new_keys, &io.new_values)?;
                    for (qh, query) in io.queries.iter().enumerate() {
                        let out = exact_attention(query, &kv.heads[model.kv_head_of(qh)])?;
                        compare(&out, &exact_out[qh], &mut fid);
                    }
                }
                LayerStore::Offloaded => {
                    pool.append(l, &io.new_keys, &io.new_values)?;
                    let n = pool.seq_len(l)?;
                    let (slot, ck) = buffers.acquire(l)?;
                    let (mut recall_sum, mut min_mass) = (0.0, f64::INFINITY);
                    for kv in 0..model.num_kv_heads {
                        let group = &io.queries[model.query_heads_of(kv)];
                        let gq = group_query(group);
                        let channels = &ck.channels[kv];
                        let prefetched = &ck.keys[kv];
                        // tokens appended after the prefetch are scored from the device-side key
                        let mut scores: Vec<f64> = prefetched
                            .iter_rows()
                            .map(|k| channels.iter().zip(k).map(|(&c, x)| gq[c] * x).sum())
                            .collect();
                        let head = pool.head_cache(l, kv)?;
                        for j in prefetched.rows()..n {
                            let k = head.keys.row(j);
                            scores.push(channels.iter().map(|&c| gq[c] * k[c]).sum());
                        }
                        let selected = select_topk_tokens(&scores, &cfg.retrieval);
                        let local_start = n.saturating_sub(cfg.retrieval.n_local);
                        let split = selected.partition_point(|&j| j < local_start);
                        let (fk, fv, transfer) = pool.fetch_topk(l, kv, &selected[..split], &cfg.link)?;
                        let (lk, lv) = pool.gather(l, kv, &selected[split..])?;
                        record.fetch_bytes += transfer.bytes;
                        let mut keys = fk;
                        let mut values = fv;
                        for (k, v) in lk.iter_rows().zip(lv.iter_rows()) {
                            keys.push_row(k)?;
                            values.push_row(v)?;
                        }
                        let subset = HeadCache::from_parts(keys, values)?;

                        let exact_head = &exact[l].heads[kv];
                        let full_logits = attention_logits(&gq, &exact_head.keys)?;
                        let reference = exact_topk(&full_logits, cfg.retrieval.n_topk.min(n));
                        recall_sum += recall_at_k(&selected, &reference);
                        for (i, q) in group.iter().enumerate() {
                            let qh = model.query_heads_of(kv).start + i;
                            min_mass = min_mass.min(selected_mass(&attention_weights(q, &exact_head.keys)?, &selected));
                            let out = exact_attention(q, &subset)?;
                            compare(&out, &exact_out[qh], &mut fid);
                        }
                        record.critical_channels.push(channels.clone());
                        record.selected.push(selected);
                    }
                    buffers.release(slot)?;
                    record.recall = Some(recall_sum / model.num_kv_heads as f64);
                    record.selected_mass = Some(min_mass);
                    record.prefetch_bytes = pending_prefetch[l];
                }
            }
            record.cosine = fid.cosine;
            record.max_abs_error = fid.max_abs;
            records.push(record);
        }
    }

    let quantization = quantization_stats(&stores, &exact, cfg, &model);
    let final_len = trace.header.prefill_len + trace.steps.len();
    let fp = FootprintParams {
        num_layers: model.num_layers as u64,
        seq_len: final_len as u64,
        num_kv_heads: model.num_kv_heads as u64,
        head_dim: model.head_dim as u64,
        element_bytes: model.element_bytes as u64,
        group_size: Some(cfg.group_size as u64),
        bits: Some(cfg.bits as u64),
        critical_channels: Some(cfg.retrieval.critical_channels as u64),
        ..Default::default()
    };
    let footprint = hybrid_footprint(&labels, &fp, cfg.retrieval.n_local as u64)?;

    let costs: Vec<LayerCosts> =
        labels.iter().map(|&lab| cfg.cost.layer_costs(&model, lab, final_len, cfg)).collect::<Result<_>>()?;
    let (_, simulation) = simulate(&build_timeline(&costs, &cfg.link, 1)?)?;

    let fidelity = summarize(&records);
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        model,
        prefill_len: trace.header.prefill_len,
        decode_steps: trace.steps.len(),
        label_source,
        layers: profiles
            .iter()
            .zip(&labels)
            .map(|(p, &label)| LayerReport {
                layer: p.layer_index,
                label,
                score: p.score,
                per_head_scores: p.per_head_scores.clone(),
                per_head_sparse_error: p.per_head_sparse_error.clone(),
            })
            .collect(),
        steps: records,
        fidelity,
        quantization,
        footprint,
        timeline: TimelineSummary { link: cfg.link, seq_len: final_len, costs, simulation },
    })
}

fn summarize(records: &[StepRecord]) -> FidelitySummary {
    let n = records.len().max(1) as f64;
    let recalls: Vec<f64> = records.iter().filter_map(|r| r.recall).collect();
    let masses: Vec<f64> = records.iter().filter_map(|r| r.selected_mass).collect();
    FidelitySummary {
        min_cosine: records.iter().map(|r| r.cosine).fold(1.0, f64::min),
        mean_cosine: if records.is_empty() { 1.0 } else { records.iter().map(|r| r.cosine).sum::<f64>() / n },
        max_abs_error: records.iter().map(|r| r.max_abs_error).fold(0.0, f64::max),
        mean_recall: (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64),
        min_selected_mass: masses.iter().copied().reduce(f64::min),
    }
}

fn error_stats(rec: &Matrix, orig: &Matrix, bound: &Matrix) -> (f64, f64, usize) {
    let (mut max, mut sum, mut violations) = (0.0f64, 0.0, 0);
    for ((r, o), b) in rec.as_slice().iter().zip(orig.as_slice()).zip(bound.as_slice()) {
        let e = (r - o).abs();
        max = max.max(e);
        sum += e;
        if e > b + 1e-6 {
            violations += 1;
        }
    }
    (max, sum / orig.as_slice().len().max(1) as f64, violations)
}

fn quantization_stats(stores: &[LayerStore], exact: &[LayerKV], cfg: &PipelineConfig, model: &ModelConfig) -> Vec<QuantizationStats> {
    let mut out = Vec::new();
    for (l, store) in stores.iter().enumerate() {
        let LayerStore::Quantized(q) = store else { continue };
        let mut s = QuantizationStats {
            layer: l,
            bits: cfg.bits,
            group_size: cfg.group_size,
            storage_bytes: q.storage_bytes(),
            fp16_bytes: 2 * exact[l].seq_len() * model.num_kv_heads * model.head_dim * model.element_bytes,
            key_max_abs_error: 0.0,
            key_mean_abs_error: 0.0,
            value_max_abs_error: 0.0,
            value_mean_abs_error: 0.0,
            bound_violations: 0,
        };
        let heads = q.heads.len() as f64;
        for (qh, eh) in q.heads.iter().zip(&exact[l].heads) {
            let (m, a, v) = error_stats(&qh.keys.dequantize(), &eh.keys, &qh.keys.error_bounds());
            s.key_max_abs_error = s.key_max_abs_error.max(m);
            s.key_mean_abs_error += a / heads;
            s.bound_violations += v;
            let (m, a, v) = error_stats(&qh.values.dequantize(), &eh.values, &qh.values.error_bounds());
            s.value_max_abs_error = s.value_max_abs_error.max(m);
            s.value_mean_abs_error += a / heads;
            s.bound_violations += v;
        }
        out.push(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_trace, AttentionMode, SyntheticSpec};

    fn trace(layers: usize, n: usize, seed: u64) -> Trace {
        let model = ModelConfig::new(layers, 4, 2, 64).unwrap();
        gen_trace(&SyntheticSpec::dense_then_sparse(model, n, 3, seed)).unwrap()
    }

    #[test]
    fn presets_match_defaults() {
        let c = PipelineConfig::hybrid_1();
        assert_eq!((c.tau, c.bits, c.group_size), (0.2, 1, 64));
        assert_eq!(c.retrieval, RetrievalConfig { n_local: 64, n_topk: 128, critical_channels: 8 });
        assert_eq!(PipelineConfig::preset("hybrid-2").unwrap().bits, 2);
        assert!(matches!(PipelineConfig::preset("x"), Err(KvError::Config(_))));
    }

    #[test]
    fn calibration_labels_first_layer_dense() {
        let t = trace(4, 512, 1);
        let r = run_pipeline(&t, &PipelineConfig::hybrid_1()).unwrap();
        assert_eq!(r.label_source, LabelSource::Calibration);
        let s: String = r.labels().iter().map(LayerLabel::short).collect();
        assert_eq!(s, "QSSS");
        assert_eq!(r.steps.len(), 4 * 3);
        assert_eq!(r.quantization.len(), 1);
        assert_eq!(r.quantization[0].bound_violations, 0);
    }

    #[test]
    fn hybrid_preset_is_faithful_on_sparse_trace() {
        let t = trace(3, 1024, 2);
        let r = run_pipeline(&t, &PipelineConfig::hybrid_1()).unwrap();
        for s in r.steps.iter().filter(|s| s.label == LayerLabel::SparsityFriendly) {
            assert!(s.selected_mass.unwrap() >= 0.99);
            assert!(s.cosine >= 0.99, "step {} layer {}: {}", s.step, s.layer, s.cosine);
            assert_eq!(s.fetch_bytes, 2 * 2 * 128 * 64 * 2);
        }
    }

    #[test]
    fn degenerate_config_is_exact() {
        let t = trace(2, 256, 3);
        let cfg = PipelineConfig {
            bits: 16,
            q_layers: Some(vec![]),
            retrieval: RetrievalConfig { n_local: 64, n_topk: 256, critical_channels: 8 },
            ..PipelineConfig::hybrid_1()
        };
        let r = run_pipeline(&t, &cfg).unwrap();
        assert!(r.fidelity.min_cosine >= 1.0 - 1e-6);
        assert!(r.fidelity.max_abs_error < 1e-9);
    }

    #[test]
    fn full_channels_without_window_recall_everything() {
        let t = trace(2, 300, 4);
        let cfg = PipelineConfig {
            q_layers: Some(vec![]),
            retrieval: RetrievalConfig { n_local: 0, n_topk: 32, critical_channels: 64 },
            ..PipelineConfig::hybrid_1()
        };
        let r = run_pipeline(&t, &cfg).unwrap();
        assert_eq!(r.fidelity.mean_recall, Some(1.0));
    }

    #[test]
    fn forced_and_trace_labels() {
        let mut t = trace(2, 256, 5);
        let cfg = PipelineConfig { q_layers: Some(vec![1]), ..PipelineConfig::hybrid_2() };
        let r = run_pipeline(&t, &cfg).unwrap();
        assert_eq!(r.label_source, LabelSource::Config);
        assert_eq!(r.labels(), vec![LayerLabel::SparsityFriendly, LayerLabel::QuantizationFriendly]);
        t.header.labels = Some(vec![LayerLabel::QuantizationFriendly; 2]);
        let r = run_pipeline(&t, &PipelineConfig::hybrid_1()).unwrap();
        assert_eq!(r.label_source, LabelSource::Trace);
        assert!(r.steps.iter().all(|s| s.recall.is_none()));
    }

    #[test]
    fn config_and_trace_errors() {
        let t = trace(2, 256, 6);
        let bad_layer = PipelineConfig { q_layers: Some(vec![2]), ..PipelineConfig::hybrid_1() };
        assert_eq!(run_pipeline(&t, &bad_layer).unwrap_err().exit_code(), 2);
        let bad_bits = PipelineConfig { bits: 3, ..PipelineConfig::hybrid_1() };
        assert_eq!(run_pipeline(&t, &bad_bits).unwrap_err().exit_code(), 2);
        let long_probe = PipelineConfig { n_q: 64, ..PipelineConfig::hybrid_1() };
        assert_eq!(run_pipeline(&t, &long_probe).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn reports_are_deterministic() {
        let model = ModelConfig::new(2, 2, 2, 32).unwrap();
        let spec = SyntheticSpec {
            layers: vec![AttentionMode::Dense, AttentionMode::Sparse { num_dominant: 3, mass: 0.9 }],
            ..SyntheticSpec::dense_then_sparse(model, 200, 2, 9)
        };
        let a = run_pipeline(&gen_trace(&spec).unwrap(), &PipelineConfig::hybrid_1()).unwrap();
        let b = run_pipeline(&gen_trace(&spec).unwrap(), &PipelineConfig::hybrid_1()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}
