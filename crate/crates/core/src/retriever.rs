//! Two-stage Top-K retrieval for offloaded layers.
//!
//! Stage 1 runs one layer early: the next layer's query is estimated from the
//! current hidden state, and the channels with the largest
//! `|q_hat_i| * max_j |K_ji|` are chosen so their key columns can be
//! prefetched. Stage 2 scores every token on those channels with the true
//! query, keeps the Top-K plus the resident local window, and runs exact
//! attention over that subset.

use serde::{Deserialize, Serialize};

use crate::error::{KvError, Result};
use crate::kv_model::{exact_attention, HeadCache, Matrix, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Most recent tokens kept resident on the device.
    pub n_local: usize,
    /// Tokens fetched from the host per step.
    pub n_topk: usize,
    /// Critical channels `d_s`.
    pub critical_channels: usize,
}

impl RetrievalConfig {
    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if self.n_topk == 0 {
            return Err(KvError::Config("n_topk must be at least 1".into()));
        }
        if self.critical_channels == 0 || self.critical_channels > head_dim {
            return Err(KvError::Config(format!(
                "critical channels {} outside 1..={head_dim}",
                self.critical_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalChannelSet {
    pub channel_scores: Vec<f64>,
    /// Ascending channel indices.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEstimate {
    /// One vector per query head.
    pub q_hat: Vec<Vec<f64>>,
    pub source_layer: usize,
}

/// `hidden · W_q`, split into per-head vectors. `w_q` is `[hidden_dim x hidden_dim]`.
pub fn project_queries(config: &ModelConfig, w_q: &Matrix, hidden: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = config.hidden_dim();
    if hidden.len() != d {
        return Err(KvError::dim("hidden state", d, hidden.len()));
    }
    if w_q.rows() != d || w_q.cols() != d {
        return Err(KvError::dim("query projection", d * d, w_q.rows() * w_q.cols()));
    }
    let mut flat = vec![0.0; d];
    for (h, row) in hidden.iter().zip(w_q.iter_rows()) {
        if *h == 0.0 {
            continue;
        }
        for (o, w) in flat.iter_mut().zip(row) {
            *o += h * w;
        }
    }
    Ok(flat.chunks(config.head_dim).map(<[f64]>::to_vec).collect())
}

/// Estimates layer `l`'s queries from layer `l - 1`'s hidden state and layer
/// `l`'s query projection.
pub fn estimate_query(
    config: &ModelConfig,
    w_q: &Matrix,
    previous_hidden: &[f64],
    source_layer: usize,
) -> Result<QueryEstimate> {
    Ok(QueryEstimate {
        q_hat: project_queries(config, w_q, previous_hidden)?,
        source_layer,
    })
}

/// Running per-channel `max |K|`, updated as tokens are appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMax {
    max_abs: Vec<f64>,
}

impl ChannelMax {
    pub fn new(head_dim: usize) -> Self {
        ChannelMax {
            max_abs: vec![0.0; head_dim],
        }
    }

    pub fn from_keys(keys: &Matrix) -> Self {
        let mut m = ChannelMax::new(keys.cols());
        for row in keys.iter_rows() {
            m.update(row);
        }
        m
    }

    pub fn update(&mut self, key: &[f64]) {
        for (m, k) in self.max_abs.iter_mut().zip(key) {
            *m = m.max(k.abs());
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.max_abs
    }
}

/// `s_i = |q_hat_i| * max_j |K_ji|`.
pub fn channel_scores(q_hat: &[f64], keys: &Matrix) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(KvError::EmptyCache);
    }
    if q_hat.len() != keys.cols() {
        return Err(KvError::dim("query width", keys.cols(), q_hat.len()));
    }
    Ok(group_channel_scores(&[q_hat], ChannelMax::from_keys(keys).as_slice()))
}

/// Channel scores for a KV head shared by several query heads: the query
/// magnitudes of the group are summed per channel.
pub fn group_channel_scores<Q: AsRef<[f64]>>(queries: &[Q], channel_max: &[f64]) -> Vec<f64> {
    let mut mag = vec![0.0; channel_max.len()];
    for q in queries {
        for (m, x) in mag.iter_mut().zip(q.as_ref()) {
            *m += x.abs();
        }
    }
    mag.iter().zip(channel_max).map(|(q, k)| q * k).collect()
}

/// Top `d_s` channels by score, ties to the lower index, returned ascending.
pub fn select_critical_channels(scores: &[f64], d_s: usize) -> Result<CriticalChannelSet> {
    if d_s == 0 || d_s > scores.len() {
        return Err(KvError::Parameter(format!(
            "critical channels {d_s} outside 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected = order[..d_s].to_vec();
    selected.sort_unstable();
    Ok(CriticalChannelSet {
        channel_scores: scores.to_vec(),
        selected,
    })
}

/// Sum of the group's query vectors; stage-2 scoring for a shared KV head.
pub fn group_query<Q: AsRef<[f64]>>(queries: &[Q]) -> Vec<f64> {
    let d = queries.first().map(|q| q.as_ref().len()).unwrap_or(0);
    let mut out = vec![0.0; d];
    for q in queries {
        for (o, x) in out.iter_mut().zip(q.as_ref()) {
            *o += x;
        }
    }
    out
}

/// Unnormalized logits over the critical channels only:
/// `logit_j = sum_i q[channels[i]] * critical_keys[j][i]`.
pub fn approx_scores(query: &[f64], critical_keys: &Matrix, channels: &[usize]) -> Result<Vec<f64>> {
    if critical_keys.cols() != channels.len() {
        return Err(KvError::dim("critical key width", channels.len(), critical_keys.cols()));
    }
    if let Some(&bad) = channels.iter().find(|&&c| c >= query.len()) {
        return Err(KvError::Parameter(format!("channel {bad} outside query width {}", query.len())));
    }
    let q_sel: Vec<f64> = channels.iter().map(|&c| query[c]).collect();
    Ok(critical_keys
        .iter_rows()
        .map(|k| q_sel.iter().zip(k).map(|(q, k)| q * k).sum())
        .collect())
}

/// Top `k` indices by score with ties going to the more recent token,
/// returned ascending.
pub fn top_indices(scores: &[f64], candidates: std::ops::Range<usize>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Local window plus the `n_topk` best-scoring older tokens, ascending.
pub fn select_topk_tokens(scores: &[f64], config: &RetrievalConfig) -> Vec<usize> {
    let n = scores.len();
    let local_start = n.saturating_sub(config.n_local);
    let mut selected = top_indices(scores, 0..local_start, config.n_topk);
    selected.extend(local_start..n);
    selected
}

/// Exact top-`k` tokens by attention weight under the same tie rule.
pub fn exact_topk(weights: &[f64], k: usize) -> Vec<usize> {
    top_indices(weights, 0..weights.len(), k)
}

/// Exact softmax attention restricted to `indices`.
pub fn sparse_attention(query: &[f64], head: &HeadCache, indices: &[usize]) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(KvError::EmptyInput("token selection"));
    }
    let subset = HeadCache::from_parts(head.keys.gather_rows(indices)?, head.values.gather_rows(indices)?)?;
    exact_attention(query, &subset)
}

pub fn recall_at_k(selected: &[usize], exact_topk: &[usize]) -> f64 {
    if exact_topk.is_empty() {
        return 1.0;
    }
    let hits = exact_topk.iter().filter(|j| selected.binary_search(j).is_ok()).count();
    hits as f64 / exact_topk.len() as f64
}

/// Exact attention mass carried by `selected`.
pub fn selected_mass(weights: &[f64], selected: &[usize]) -> f64 {
    selected.iter().map(|&j| weights[j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_model::{attention_weights, dot};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn cfg(n_local: usize, n_topk: usize, d_s: usize) -> RetrievalConfig {
        RetrievalConfig { n_local, n_topk, critical_channels: d_s }
    }

    #[test]
    fn estimate_query_examples() {
        let config = ModelConfig::new(2, 1, 1, 3).unwrap();
        let mut eye = Matrix::zeros(0, 3);
        for i in 0..3 {
            let mut r = vec![0.0; 3];
            r[i] = 1.0;
            eye.push_row(&r).unwrap();
        }
        let h = [0.5, -2.0, 7.0];
        assert_eq!(estimate_query(&config, &eye, &h, 0).unwrap().q_hat, vec![h.to_vec()]);
        assert_eq!(estimate_query(&config, &eye, &[0.0; 3], 0).unwrap().q_hat, vec![vec![0.0; 3]]);
        // same hidden state and projection reproduce the true query exactly
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_matrix(&mut rng, 3, 3);
        let truth = project_queries(&config, &w, &h).unwrap();
        assert_eq!(estimate_query(&config, &w, &h, 1).unwrap().q_hat, truth);
        assert!(estimate_query(&config, &w, &[1.0], 1).is_err());
    }

    #[test]
    fn channel_score_examples() {
        let keys = Matrix::from_rows(&[vec![2.0, -1.0, 0.5], vec![-1.0, 0.5, -4.0]]).unwrap();
        assert_eq!(channel_scores(&[1.0, -3.0, 0.5], &keys).unwrap(), vec![2.0, 3.0, 2.0]);
        assert_eq!(channel_scores(&[0.0; 3], &keys).unwrap(), vec![0.0; 3]);
        assert!(matches!(channel_scores(&[1.0; 3], &Matrix::empty(3)), Err(KvError::EmptyCache)));
    }

    #[test]
    fn channel_scores_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let keys = random_matrix(&mut rng, 64, 16);
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut expect = vec![0.0; 16];
        for i in 0..16 {
            let mut m: f64 = 0.0;
            for j in 0..64 {
                m = m.max(keys.get(j, i).abs());
            }
            expect[i] = q[i].abs() * m;
        }
        assert_eq!(channel_scores(&q, &keys).unwrap(), expect);

        // the running maximum matches the batch maximum
        let mut running = ChannelMax::new(16);
        for row in keys.iter_rows() {
            running.update(row);
        }
        assert_eq!(running, ChannelMax::from_keys(&keys));
    }

    #[test]
    fn critical_channel_examples() {
        assert_eq!(select_critical_channels(&[2.0, 3.0, 2.0], 1).unwrap().selected, vec![1]);
        assert_eq!(select_critical_channels(&[5.0, 5.0, 1.0], 1).unwrap().selected, vec![0]);
        assert_eq!(select_critical_channels(&[1.0, 9.0, 5.0, 0.0], 4).unwrap().selected, vec![0, 1, 2, 3]);
        assert_eq!(select_critical_channels(&[1.0, 9.0, 5.0, 0.0], 2).unwrap().selected, vec![1, 2]);
        assert!(select_critical_channels(&[1.0], 2).is_err());
    }

    #[test]
    fn approx_scores_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let keys = random_matrix(&mut rng, 40, 6);
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let all: Vec<usize> = (0..6).collect();
        let full = approx_scores(&q, &keys.select_columns(&all).unwrap(), &all).unwrap();
        let exact: Vec<f64> = keys.iter_rows().map(|k| dot(&q, k)).collect();
        assert_eq!(full, exact);

        let one = approx_scores(&q, &keys.select_columns(&[4]).unwrap(), &[4]).unwrap();
        for (s, j) in one.iter().zip(0..40) {
            assert_eq!(*s, q[4] * keys.get(j, 4));
        }

        let chans = [0, 2, 5];
        let masked = approx_scores(&q, &keys.select_columns(&chans).unwrap(), &chans).unwrap();
        for j in 0..40 {
            let mut s = 0.0;
            for &c in &chans {
                s += q[c] * keys.get(j, c);
            }
            assert_eq!(masked[j], s);
        }
        assert!(approx_scores(&q, &keys, &chans).is_err());
    }

    #[test]
    fn topk_selection_examples() {
        let scores = vec![0.1, 0.5, 0.3, 0.2, 0.9];
        assert_eq!(select_topk_tokens(&scores, &cfg(2, 3, 1)), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_topk_tokens(&scores, &cfg(10, 10, 1)), vec![0, 1, 2, 3, 4]);

        let mut planted = vec![0.0; 100];
        planted[13] = 50.0;
        assert_eq!(select_topk_tokens(&planted, &cfg(4, 1, 1)), vec![13, 96, 97, 98, 99]);

        // ties go to the more recent token
        let ties = vec![1.0, 1.0, 1.0, 0.0];
        assert_eq!(select_topk_tokens(&ties, &cfg(1, 1, 1)), vec![2, 3]);
        assert_eq!(select_topk_tokens(&ties, &cfg(0, 2, 1)), vec![1, 2]);

        // heads select independently
        let head_a = vec![9.0, 0.0, 0.0, 0.0, 0.0];
        let head_b = vec![0.0, 0.0, 9.0, 0.0, 0.0];
        assert_eq!(select_topk_tokens(&head_a, &cfg(1, 1, 1)), vec![0, 4]);
        assert_eq!(select_topk_tokens(&head_b, &cfg(1, 1, 1)), vec![2, 4]);
    }

    #[test]
    fn sparse_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let head = HeadCache::from_parts(random_matrix(&mut rng, 30, 4), random_matrix(&mut rng, 30, 4)).unwrap();
        let q = [0.3, -1.0, 0.8, 0.1];
        let all: Vec<usize> = (0..30).collect();
        let a = sparse_attention(&q, &head, &all).unwrap();
        let b = exact_attention(&q, &head).unwrap();
        assert!(crate::kv_model::max_abs_diff(&a, &b) < 1e-6);
        assert_eq!(sparse_attention(&q, &head, &[7]).unwrap(), head.values.row(7));
        assert!(sparse_attention(&q, &head, &[]).is_err());
        assert!(sparse_attention(&q, &head, &[30]).is_err());
    }

    #[test]
    fn sparse_attention_high_mass_selection() {
        // three planted tokens hold >= 99.9% of the mass
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut keys = random_matrix(&mut rng, 200, 8);
        let values = random_matrix(&mut rng, 200, 8);
        let q = vec![1.0; 8];
        let mut rows: Vec<Vec<f64>> = keys.iter_rows().map(|r| r.iter().map(|x| x * 0.1).collect()).collect();
        for j in [10, 70, 150] {
            rows[j] = vec![4.0; 8];
        }
        keys = Matrix::from_rows(&rows).unwrap();
        let head = HeadCache::from_parts(keys, values).unwrap();
        let w = attention_weights(&q, &head.keys).unwrap();
        let sel = vec![10, 70, 150];
        assert!(selected_mass(&w, &sel) >= 0.999);
        let cos = crate::kv_model::cosine_similarity(
            &sparse_attention(&q, &head, &sel).unwrap(),
            &exact_attention(&q, &head).unwrap(),
        );
        assert!(cos >= 0.999);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(recall_at_k(&[1, 2, 3], &[4, 5]), 0.0);
        assert_eq!(recall_at_k(&[1, 2, 3, 9], &[2, 9]), 1.0);
        assert_eq!(recall_at_k(&[1, 2], &[2, 9]), 0.5);
    }

    // brute force: sort all tokens by exact weight, independent of top_indices
    fn brute_force_topk(w: &[f64], k: usize) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = w.iter().cloned().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
        let mut out: Vec<usize> = pairs.iter().take(k).map(|p| p.1).collect();
        out.sort();
        out
    }

    proptest! {
        #[test]
        fn full_channels_no_window_is_exact(seed in 0u64..300, n in 1usize..200, k in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys = random_matrix(&mut rng, n, 8);
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let set = select_critical_channels(&channel_scores(&q, &keys).unwrap(), 8).unwrap();
            let approx = approx_scores(&q, &keys.select_columns(&set.selected).unwrap(), &set.selected).unwrap();
            let sel = select_topk_tokens(&approx, &cfg(0, k, 8));
            let truth = brute_force_topk(&attention_weights(&q, &keys).unwrap(), k);
            prop_assert_eq!(recall_at_k(&sel, &truth), 1.0);
            prop_assert_eq!(sel, truth);
        }

        #[test]
        fn larger_selection_never_loses_mass(seed in 0u64..300, a in 1usize..50, b in 0usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys = random_matrix(&mut rng, 80, 4);
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w = attention_weights(&q, &keys).unwrap();
            let scores: Vec<f64> = (0..80).map(|_| rng.random::<f64>()).collect();
            let small = select_topk_tokens(&scores, &cfg(3, a, 1));
            let big = select_topk_tokens(&scores, &cfg(3, a + b, 1));
            prop_assert!(small.iter().all(|j| big.binary_search(j).is_ok()));
            prop_assert!(1.0 - selected_mass(&w, &big) <= 1.0 - selected_mass(&w, &small) + 1e-12);
        }

        #[test]
        fn approx_error_bounded_by_unselected_scores(seed in 0u64..300, d_s in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys = random_matrix(&mut rng, 50, 12);
            let q: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let scores = channel_scores(&q, &keys).unwrap();
            let set = select_critical_channels(&scores, d_s).unwrap();
            let approx = approx_scores(&q, &keys.select_columns(&set.selected).unwrap(), &set.selected).unwrap();
            let bound: f64 = (0..12).filter(|c| !set.selected.contains(c)).map(|c| scores[c]).sum();
            for (j, a) in approx.iter().enumerate() {
                prop_assert!((a - dot(&q, keys.row(j))).abs() <= bound + 1e-9);
            }
        }

        #[test]
        fn selection_is_deterministic_and_sized(seed in 0u64..300, n in 1usize..300, n_local in 0usize..40, n_topk in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5)) as f64).collect();
            let c = cfg(n_local, n_topk, 1);
            let a = select_topk_tokens(&scores, &c);
            prop_assert_eq!(a.len(), n.min(n_local + n_topk));
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(a, select_topk_tokens(&scores, &c));
        }
    }
}
