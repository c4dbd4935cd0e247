//! Offline layer classification.
//!
//! A layer whose recent queries spread their attention beyond the top-k keys
//! has a high dense preference score and is stored quantized; a layer whose
//! attention concentrates on a few keys is offloaded and served by Top-K
//! retrieval.

use serde::{Deserialize, Serialize};

use crate::error::{KvError, Result};
use crate::kv_model::{attention_weights, LayerKV, Matrix, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerLabel {
    QuantizationFriendly,
    SparsityFriendly,
}

impl LayerLabel {
    pub fn short(&self) -> char {
        match self {
            LayerLabel::QuantizationFriendly => 'Q',
            LayerLabel::SparsityFriendly => 'S',
        }
    }
}

/// Calibration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityProbe {
    /// Keys kept per query row; `None` means 5% of the prompt, at least 1.
    pub k: Option<usize>,
    /// Number of trailing prompt queries scored.
    pub n_q: usize,
    pub tau: f64,
}

impl Default for SparsityProbe {
    fn default() -> Self {
        SparsityProbe {
            k: None,
            n_q: 32,
            tau: 0.2,
        }
    }
}

impl SparsityProbe {
    pub fn resolve_k(&self, n: usize) -> usize {
        self.k.unwrap_or_else(|| ((0.05 * n as f64).ceil() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 {
            return Err(KvError::Config("n_q must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(KvError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.k == Some(0) {
            return Err(KvError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer_index: usize,
    pub per_head_scores: Vec<f64>,
    /// Mean of `per_head_scores`.
    pub score: f64,
    pub label: LayerLabel,
    /// Mean sparse error of the scored queries, one entry per query head.
    pub per_head_sparse_error: Vec<f64>,
}

/// Sum of the `k` largest entries.
fn top_k_sum(weights: &[f64], k: usize) -> f64 {
    let mut sorted = weights.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    sorted[..k].iter().sum()
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(KvError::Parameter(format!("k = {k} outside 1..={n}")));
    }
    Ok(())
}

/// Attention mass lost when only the top-`k` weights are kept.
pub fn sparse_error(weights: &[f64], k: usize) -> Result<f64> {
    check_k(k, weights.len())?;
    Ok((1.0 - top_k_sum(weights, k)).clamp(0.0, 1.0))
}

/// Dense preference score of one head, normalized by the number of query rows
/// so the result lies in `[0, 1)`.
pub fn dense_preference_score(recent_queries: &Matrix, keys: &Matrix, k: usize) -> Result<f64> {
    if recent_queries.is_empty() {
        return Err(KvError::EmptyInput("recent queries"));
    }
    if recent_queries.cols() != keys.cols() {
        return Err(KvError::dim("query width", keys.cols(), recent_queries.cols()));
    }
    if recent_queries.rows() > keys.rows() {
        return Err(KvError::Parameter(format!(
            "{} recent queries exceed {} keys",
            recent_queries.rows(),
            keys.rows()
        )));
    }
    check_k(k, keys.rows())?;
    let mut kept = 0.0;
    for q in recent_queries.iter_rows() {
        kept += top_k_sum(&attention_weights(q, keys)?, k);
    }
    let n_q = recent_queries.rows() as f64;
    Ok(((n_q - kept) / n_q).max(0.0))
}

/// Averages head scores and applies the strict threshold `score > tau`.
pub fn classify_layer(layer_index: usize, head_scores: &[f64], tau: f64) -> Result<LayerProfile> {
    if head_scores.is_empty() {
        return Err(KvError::EmptyInput("head scores"));
    }
    let score = head_scores.iter().sum::<f64>() / head_scores.len() as f64;
    let label = if score > tau {
        LayerLabel::QuantizationFriendly
    } else {
        LayerLabel::SparsityFriendly
    };
    Ok(LayerProfile {
        layer_index,
        per_head_scores: head_scores.to_vec(),
        score,
        label,
        per_head_sparse_error: Vec::new(),
    })
}

/// Prompt data needed to profile one layer.
pub struct CalibrationLayer<'a> {
    pub cache: &'a LayerKV,
    /// Trailing prompt queries, one `[rows x head_dim]` matrix per query head.
    pub queries: &'a [Matrix],
}

/// Profiles every layer. Layers are independent and scored in order.
pub fn calibrate(
    config: &ModelConfig,
    layers: &[CalibrationLayer<'_>],
    probe: &SparsityProbe,
) -> Result<Vec<LayerProfile>> {
    probe.validate()?;
    if layers.len() != config.num_layers {
        return Err(KvError::dim("calibration layers", config.num_layers, layers.len()));
    }
    layers
        .iter()
        .enumerate()
        .map(|(l, layer)| profile_layer(config, l, layer, probe))
        .collect()
}

fn profile_layer(
    config: &ModelConfig,
    index: usize,
    layer: &CalibrationLayer<'_>,
    probe: &SparsityProbe,
) -> Result<LayerProfile> {
    let n = layer.cache.seq_len();
    if n < probe.n_q {
        return Err(KvError::Trace(format!(
            "layer {index}: prompt of {n} tokens is shorter than n_q = {}",
            probe.n_q
        )));
    }
    if layer.queries.len() != config.num_query_heads {
        return Err(KvError::dim("calibration query heads", config.num_query_heads, layer.queries.len()));
    }
    let k = probe.resolve_k(n).min(n);
    let mut scores = Vec::with_capacity(layer.queries.len());
    let mut errors = Vec::with_capacity(layer.queries.len());
    for (h, q) in layer.queries.iter().enumerate() {
        if q.rows() < probe.n_q {
            return Err(KvError::Trace(format!(
                "layer {index}: {} stored prompt queries, n_q = {}",
                q.rows(),
                probe.n_q
            )));
        }
        let recent = q.slice_rows(q.rows() - probe.n_q, q.rows());
        let keys = &layer.cache.heads[config.kv_head_of(h)].keys;
        scores.push(dense_preference_score(&recent, keys, k)?);
        let mut err = 0.0;
        for row in recent.iter_rows() {
            err += sparse_error(&attention_weights(row, keys)?, k)?;
        }
        errors.push(err / probe.n_q as f64);
    }
    let mut profile = classify_layer(index, &scores, probe.tau)?;
    profile.per_head_sparse_error = errors;
    Ok(profile)
}
