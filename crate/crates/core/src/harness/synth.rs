//! Seeded synthetic traces with dense or sparse attention per layer and
//! planted key-channel outliers.
//!
//! Construction, per layer and KV head:
//!
//! * A set `O` of outlier channels. The residual stream has a few massive
//!   positions per head block; `W_q` is a signed permutation that routes them
//!   onto `O` with sign `+1`, so queries are large and positive there.
//! * Dense layers give every token the same key on `O` (plus small noise),
//!   which makes the logits nearly flat. Sparse layers draw `O` entries with
//!   random signs, then add an offset `alpha` on `O` to a few planted tokens;
//!   `alpha` is found by bisection so every query of the layer puts the
//!   requested mass on them.
//! * Off-outlier key channels are small enough that `O` carries the requested
//!   share of key energy.
//!
//! All tensors are rounded to f16 before any measurement, so the written
//! trace is exactly the data the construction was checked on.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::trace::{round_f16, Trace, TraceHeader, TraceLayer, FORMAT_VERSION};
use crate::error::{KvError, Result};
use crate::kv_model::{dot, softmax, DecodeStep, HeadCache, LayerKV, Matrix, ModelConfig};
use crate::retriever::project_queries;

const MASSIVE_AMPLITUDE: f64 = 4.0;
const HIDDEN_SIGMA: f64 = 0.25;
const LAYER_DRIFT_SIGMA: f64 = 0.05;
const ALPHA_MAX: f64 = 64.0;
/// Planted tokens live in the first 3/4 of the prompt, away from the local window.
const DOMINANT_SPAN: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AttentionMode {
    Dense,
    Sparse { num_dominant: usize, mass: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub num_channels: usize,
    /// Minimum share of key energy on the outlier channels.
    pub magnitude_ratio: f64,
    /// Massive residual amplitudes vary per token, so the ranking of the
    /// outlier channels changes from step to step.
    pub drift: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub model: ModelConfig,
    pub prefill_len: usize,
    pub decode_steps: usize,
    pub prefill_query_rows: usize,
    pub layers: Vec<AttentionMode>,
    pub outliers: OutlierSpec,
    pub seed: u64,
}

impl SyntheticSpec {
    /// One dense layer followed by sparse layers, the usual layer-0 pattern.
    pub fn dense_then_sparse(model: ModelConfig, prefill_len: usize, decode_steps: usize, seed: u64) -> Self {
        let mut layers = vec![AttentionMode::Sparse { num_dominant: 4, mass: 0.99 }; model.num_layers];
        layers[0] = AttentionMode::Dense;
        SyntheticSpec {
            model,
            prefill_len,
            decode_steps,
            prefill_query_rows: 32.min(prefill_len),
            layers,
            outliers: OutlierSpec { num_channels: 8.min(model.head_dim), magnitude_ratio: 0.95, drift: false },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(KvError::Config(m));
        if self.layers.len() != self.model.num_layers {
            return bad(format!("{} layer modes for {} layers", self.layers.len(), self.model.num_layers));
        }
        if self.prefill_len == 0 {
            return bad("prefill_len must be at least 1".into());
        }
        if self.prefill_query_rows > self.prefill_len {
            return bad("prefill_query_rows exceeds prefill_len".into());
        }
        let o = &self.outliers;
        if o.num_channels == 0 || o.num_channels > self.model.head_dim {
            return bad(format!("outlier channels {} outside 1..={}", o.num_channels, self.model.head_dim));
        }
        if !(o.magnitude_ratio > 0.0 && o.magnitude_ratio < 1.0) {
            return bad(format!("magnitude_ratio {} outside (0, 1)", o.magnitude_ratio));
        }
        let span = dominant_span(self.prefill_len);
        for (l, mode) in self.layers.iter().enumerate() {
            if let AttentionMode::Sparse { num_dominant, mass } = *mode {
                if num_dominant == 0 {
                    return bad(format!("layer {l}: num_dominant must be at least 1"));
                }
                if !(mass > 0.0 && mass <= 1.0) {
                    return bad(format!("layer {l}: mass {mass} outside (0, 1]"));
                }
                if num_dominant > span {
                    return bad(format!("layer {l}: {num_dominant} planted tokens do not fit in {span} positions"));
                }
            }
        }
        Ok(())
    }
}

fn dominant_span(prefill_len: usize) -> usize {
    (prefill_len as f64 * DOMINANT_SPAN).floor() as usize
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * sigma
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Residual states of one token for every layer.
fn hidden_chain(rng: &mut ChaCha8Rng, model: &ModelConfig, m: usize, drift: bool) -> Vec<Vec<f64>> {
    let (d, dh) = (model.hidden_dim(), model.head_dim);
    let mut h: Vec<f64> = (0..d)
        .map(|i| {
            if i % dh < m {
                if drift {
                    MASSIVE_AMPLITUDE * rng.random_range(0.3..1.0)
                } else {
                    MASSIVE_AMPLITUDE
                }
            } else {
                normal(rng, HIDDEN_SIGMA)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(model.num_layers);
    for _ in 0..model.num_layers {
        out.push(h.iter().map(|&x| round_f16(x)).collect());
        for x in &mut h {
            *x += normal(rng, LAYER_DRIFT_SIGMA);
        }
    }
    out
}

struct LayerPlan {
    w_q: Matrix,
    /// Outlier channels per KV head, ascending.
    outliers: Vec<Vec<usize>>,
}

fn plan_layer(rng: &mut ChaCha8Rng, model: &ModelConfig, m: usize) -> LayerPlan {
    let (d, dh) = (model.hidden_dim(), model.head_dim);
    let outliers: Vec<Vec<usize>> = (0..model.num_kv_heads)
        .map(|_| {
            let mut o = sample(rng, dh, m).into_vec();
            o.sort_unstable();
            o
        })
        .collect();
    let mut w = vec![0.0; d * d];
    for qh in 0..model.num_query_heads {
        let o = &outliers[model.kv_head_of(qh)];
        let mut rest: Vec<usize> = (0..dh).filter(|c| !o.contains(c)).collect();
        // Fisher-Yates on the non-outlier targets
        for i in (1..rest.len()).rev() {
            let j = rng.random_range(0..=i);
            rest.swap(i, j);
        }
        let base = qh * dh;
        for (j, &c) in o.iter().enumerate() {
            w[(base + j) * d + base + c] = 1.0;
        }
        for (j, &c) in rest.iter().enumerate() {
            w[(base + m + j) * d + base + c] = sign(rng);
        }
    }
    LayerPlan { w_q: Matrix::from_vec(d, d, w).expect("square"), outliers }
}

/// Generates a trace. The same spec always yields the same trace.
pub fn gen_trace(spec: &SyntheticSpec) -> Result<Trace> {
    spec.validate()?;
    let model = spec.model;
    let (dh, n, steps, rows) = (model.head_dim, spec.prefill_len, spec.decode_steps, spec.prefill_query_rows);
    let m = spec.outliers.num_channels;
    let r = spec.outliers.magnitude_ratio;
    // Off-outlier noise sized so the outlier share keeps a 2x margin over the
    // weakest possible outlier energy (|key| >= 0.5 on every outlier channel).
    let sigma_r = if dh > m { (0.5 * m as f64 * 0.25 * (1.0 - r) / (r * (dh - m) as f64)).sqrt() } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = n + steps;

    let plans: Vec<LayerPlan> = (0..model.num_layers).map(|_| plan_layer(&mut rng, &model, m)).collect();

    let prefill_hidden: Vec<Vec<Vec<f64>>> =
        (0..rows).map(|_| hidden_chain(&mut rng, &model, m, spec.outliers.drift)).collect();
    let step_hidden: Vec<Vec<Vec<f64>>> =
        (0..steps).map(|_| hidden_chain(&mut rng, &model, m, spec.outliers.drift)).collect();

    let mut layers = Vec::with_capacity(model.num_layers);
    let mut layer_steps: Vec<Vec<DecodeStep>> = Vec::with_capacity(model.num_layers);
    for (l, plan) in plans.iter().enumerate() {
        let mode = spec.layers[l];
        let mut keys: Vec<Vec<Vec<f64>>> = Vec::with_capacity(model.num_kv_heads);
        let mut values: Vec<Vec<Vec<f64>>> = Vec::with_capacity(model.num_kv_heads);
        for o in &plan.outliers {
            let consts: Vec<f64> = o.iter().map(|_| sign(&mut rng) * rng.random_range(0.5..1.0)).collect();
            let mut head_keys = Vec::with_capacity(total);
            for _ in 0..total {
                let mut k: Vec<f64> = (0..dh).map(|_| normal(&mut rng, sigma_r)).collect();
                for (j, &c) in o.iter().enumerate() {
                    k[c] = match mode {
                        AttentionMode::Dense => consts[j] + normal(&mut rng, sigma_r),
                        AttentionMode::Sparse { .. } => sign(&mut rng) * rng.random_range(0.5..1.0),
                    };
                }
                head_keys.push(k);
            }
            keys.push(head_keys);
            values.push((0..total).map(|_| (0..dh).map(|_| round_f16(normal(&mut rng, 1.0))).collect()).collect());
        }

        let project = |h: &[f64]| -> Result<Vec<Vec<f64>>> {
            Ok(project_queries(&model, &plan.w_q, h)?.into_iter().map(|q| q.into_iter().map(round_f16).collect()).collect())
        };
        let prefill_q: Vec<Vec<Vec<f64>>> = prefill_hidden.iter().map(|c| project(&c[l])).collect::<Result<_>>()?;
        let step_q: Vec<Vec<Vec<f64>>> = step_hidden.iter().map(|c| project(&c[l])).collect::<Result<_>>()?;

        if let AttentionMode::Sparse { num_dominant, mass } = mode {
            let dominant = {
                let mut d = sample(&mut rng, dominant_span(n), num_dominant).into_vec();
                d.sort_unstable();
                d
            };
            let target = if mass >= 1.0 { 1.0 - 1e-9 } else { mass + (1.0 - mass) / 2.0 };
            for (kv, o) in plan.outliers.iter().enumerate() {
                let heads: Vec<usize> = model.query_heads_of(kv).collect();
                let mut queries: Vec<(&[f64], usize)> = Vec::new();
                for q in &prefill_q {
                    for &qh in &heads {
                        queries.push((&q[qh], n));
                    }
                }
                for (t, q) in step_q.iter().enumerate() {
                    for &qh in &heads {
                        queries.push((&q[qh], n + t + 1));
                    }
                }
                let alpha = plant_alpha(&keys[kv], &dominant, o, &queries, target)
                    .ok_or_else(|| KvError::Config(format!("layer {l}: attention mass {mass} is not reachable")))?;
                for &p in &dominant {
                    for &c in o {
                        keys[kv][p][c] += alpha;
                    }
                }
            }
        }
        for head in keys.iter_mut() {
            for k in head.iter_mut() {
                for x in k.iter_mut() {
                    *x = round_f16(*x);
                }
            }
        }

        let heads = keys
            .iter()
            .zip(&values)
            .map(|(k, v)| HeadCache::from_parts(Matrix::from_rows(&k[..n])?, Matrix::from_rows(&v[..n])?))
            .collect::<Result<Vec<_>>>()?;
        let prefill_queries = (0..model.num_query_heads)
            .map(|qh| {
                let rows_q: Vec<&[f64]> = prefill_q.iter().map(|q| q[qh].as_slice()).collect();
                if rows_q.is_empty() {
                    Ok(Matrix::empty(dh))
                } else {
                    Matrix::from_rows(&rows_q)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(TraceLayer { w_q: plan.w_q.clone(), prefill: LayerKV { heads }, prefill_queries });
        layer_steps.push(
            (0..steps)
                .map(|t| DecodeStep {
                    queries: step_q[t].clone(),
                    hidden_state: step_hidden[t][l].clone(),
                    new_keys: keys.iter().map(|k| k[n + t].clone()).collect(),
                    new_values: values.iter().map(|v| v[n + t].clone()).collect(),
                })
                .collect(),
        );
    }

    let steps_major: Vec<Vec<DecodeStep>> =
        (0..steps).map(|t| layer_steps.iter().map(|s| s[t].clone()).collect()).collect();
    Ok(Trace {
        header: TraceHeader {
            format_version: FORMAT_VERSION,
            model,
            prefill_len: n,
            prefill_query_rows: rows,
            decode_steps: steps,
            generator: Some(spec.clone()),
            labels: None,
            sections: Vec::new(),
            digest: String::new(),
        },
        layers,
        steps: steps_major,
    })
}

/// Smallest offset (to bisection precision) that gives every query at least
/// `target` mass on the planted tokens, measured on f16-rounded keys.
fn plant_alpha(
    keys: &[Vec<f64>],
    dominant: &[usize],
    outliers: &[usize],
    queries: &[(&[f64], usize)],
    target: f64,
) -> Option<f64> {
    let scale = 1.0 / (keys[0].len() as f64).sqrt();
    // logits of unplanted tokens do not depend on alpha
    let base: Vec<Vec<f64>> = queries
        .iter()
        .map(|(q, len)| keys[..*len].iter().map(|k| dot(q, &round_keys(k)) * scale).collect())
        .collect();
    let mass_at = |alpha: f64| -> f64 {
        let planted: Vec<Vec<f64>> = dominant
            .iter()
            .map(|&p| {
                let mut k = keys[p].clone();
                for &c in outliers {
                    k[c] += alpha;
                }
                round_keys(&k)
            })
            .collect();
        let mut worst = f64::INFINITY;
        for ((q, _), b) in queries.iter().zip(&base) {
            let mut logits = b.clone();
            for (&p, k) in dominant.iter().zip(&planted) {
                logits[p] = dot(q, k) * scale;
            }
            let w = softmax(&logits);
            worst = worst.min(dominant.iter().map(|&p| w[p]).sum());
        }
        worst
    };
    if queries.is_empty() {
        return Some(0.0);
    }
    if mass_at(ALPHA_MAX) < target {
        return None;
    }
    let (mut lo, mut hi) = (0.0, ALPHA_MAX);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if mass_at(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

fn round_keys(k: &[f64]) -> Vec<f64> {
    k.iter().map(|&x| round_f16(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identifier::sparse_error;
    use crate::kv_model::attention_weights;

    fn model() -> ModelConfig {
        ModelConfig::new(2, 2, 1, 32).unwrap()
    }

    fn spec(layers: Vec<AttentionMode>) -> SyntheticSpec {
        SyntheticSpec {
            model: model(),
            prefill_len: 256,
            decode_steps: 2,
            prefill_query_rows: 8,
            layers,
            outliers: OutlierSpec { num_channels: 4, magnitude_ratio: 0.95, drift: false },
            seed: 11,
        }
    }

    fn decode_weights(trace: &Trace, layer: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let m = trace.model();
        for t in 0..trace.steps.len() {
            let kv = trace.cache_after(layer, t + 1).unwrap();
            for (qh, q) in trace.steps[t][layer].queries.iter().enumerate() {
                out.push(attention_weights(q, &kv.heads[m.kv_head_of(qh)].keys).unwrap());
            }
        }
        out
    }

    #[test]
    fn dense_layer_is_spread_out() {
        let t = gen_trace(&spec(vec![AttentionMode::Dense; 2])).unwrap();
        for w in decode_weights(&t, 0) {
            let k = (0.05 * w.len() as f64).ceil() as usize;
            assert!(sparse_error(&w, k).unwrap() >= 0.5);
        }
    }

    #[test]
    fn sparse_layer_concentrates_mass() {
        let sp = AttentionMode::Sparse { num_dominant: 4, mass: 0.99 };
        let t = gen_trace(&spec(vec![sp, sp])).unwrap();
        for l in 0..2 {
            for w in decode_weights(&t, l) {
                assert!(sparse_error(&w, 4).unwrap() <= 0.01);
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = spec(vec![AttentionMode::Dense, AttentionMode::Sparse { num_dominant: 2, mass: 0.9 }]);
        let a = gen_trace(&s).unwrap().to_bytes().unwrap();
        let b = gen_trace(&s).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let c = gen_trace(&SyntheticSpec { seed: 12, ..s }).unwrap().to_bytes().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn outlier_channels_hold_key_energy() {
        let t = gen_trace(&spec(vec![AttentionMode::Dense, AttentionMode::Sparse { num_dominant: 3, mass: 0.95 }])).unwrap();
        for layer in &t.layers {
            let keys = &layer.prefill.heads[0].keys;
            let mut energy: Vec<f64> = (0..keys.cols()).map(|c| keys.column(c).map(|x| x * x).sum()).collect();
            let total: f64 = energy.iter().sum();
            energy.sort_by(|a, b| b.total_cmp(a));
            assert!(energy[..4].iter().sum::<f64>() / total >= 0.95);
        }
    }

    #[test]
    fn rejects_infeasible_specs() {
        let mut s = spec(vec![AttentionMode::Sparse { num_dominant: 0, mass: 1.0 }, AttentionMode::Dense]);
        assert!(matches!(gen_trace(&s), Err(KvError::Config(_))));
        s.layers[0] = AttentionMode::Sparse { num_dominant: 1, mass: 0.0 };
        assert!(matches!(gen_trace(&s), Err(KvError::Config(_))));
        s.layers[0] = AttentionMode::Sparse { num_dominant: 250, mass: 0.5 };
        assert!(matches!(gen_trace(&s), Err(KvError::Config(_))));
        s.layers = vec![AttentionMode::Dense];
        assert!(matches!(gen_trace(&s), Err(KvError::Config(_))));
    }

    #[test]
    fn stored_queries_are_projected_hidden_states() {
        let t = gen_trace(&spec(vec![AttentionMode::Dense; 2])).unwrap();
        let m = t.model();
        for l in 0..2 {
            let s = &t.steps[1][l];
            assert_eq!(project_queries(m, &t.layers[l].w_q, &s.hidden_state).unwrap(), s.queries);
        }
    }
}
