//! Reference KV-cache data model and exact attention.
//!
//! Everything here is uncompressed and computed in `f64`; the other modules
//! measure their approximations against these functions.

use serde::{Deserialize, Serialize};

use crate::error::{KvError, Result};

/// Bytes per stored cache element (16-bit floats).
pub const ELEMENT_BYTES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub element_bytes: usize,
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        num_query_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            num_layers,
            num_query_heads,
            num_kv_heads,
            head_dim,
            element_bytes: ELEMENT_BYTES,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(KvError::Config("num_layers must be at least 1".into()));
        }
        if self.num_kv_heads == 0 || self.num_query_heads == 0 {
            return Err(KvError::Config("head counts must be at least 1".into()));
        }
        if !self.num_query_heads.is_multiple_of(self.num_kv_heads) {
            return Err(KvError::Config(format!(
                "{} query heads cannot be grouped over {} kv heads",
                self.num_query_heads, self.num_kv_heads
            )));
        }
        if self.head_dim == 0 {
            return Err(KvError::Config("head_dim must be at least 1".into()));
        }
        if self.element_bytes != ELEMENT_BYTES {
            return Err(KvError::Config(format!(
                "element_bytes is fixed at {ELEMENT_BYTES}"
            )));
        }
        Ok(())
    }

    /// Residual-stream width, `num_query_heads * head_dim`.
    pub fn hidden_dim(&self) -> usize {
        self.num_query_heads * self.head_dim
    }

    /// Number of query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    pub fn kv_head_of(&self, query_head: usize) -> usize {
        query_head / self.group_size()
    }

    /// Query heads served by `kv_head`.
    pub fn query_heads_of(&self, kv_head: usize) -> std::ops::Range<usize> {
        let g = self.group_size();
        kv_head * g..(kv_head + 1) * g
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// A matrix with no rows and a fixed row width.
    pub fn empty(cols: usize) -> Self {
        Matrix {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KvError::dim("matrix data", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut m = Matrix::empty(cols);
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.get(r, c))
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(KvError::dim("row width", self.cols, row.len()));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Rows at `indices`, in the requested order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::empty(self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(KvError::Parameter(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            out.push_row(self.row(i))?;
        }
        Ok(out)
    }

    /// Column slice `[rows x channels.len()]`.
    pub fn select_columns(&self, channels: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.cols) {
            return Err(KvError::Parameter(format!(
                "column {bad} out of range for {} columns",
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * channels.len());
        for row in self.iter_rows() {
            data.extend(channels.iter().map(|&c| row[c]));
        }
        Matrix::from_vec(self.rows, channels.len(), data)
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

/// One KV head's cache: `keys` and `values` are both `[n x head_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCache {
    pub keys: Matrix,
    pub values: Matrix,
}

impl HeadCache {
    pub fn new(head_dim: usize) -> Self {
        HeadCache {
            keys: Matrix::empty(head_dim),
            values: Matrix::empty(head_dim),
        }
    }

    pub fn from_parts(keys: Matrix, values: Matrix) -> Result<Self> {
        if keys.rows() != values.rows() {
            return Err(KvError::dim("value rows", keys.rows(), values.rows()));
        }
        if keys.cols() != values.cols() {
            return Err(KvError::dim("value width", keys.cols(), values.cols()));
        }
        Ok(HeadCache { keys, values })
    }

    pub fn seq_len(&self) -> usize {
        self.keys.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn append(&mut self, key: &[f64], value: &[f64]) -> Result<()> {
        if key.len() != self.head_dim() {
            return Err(KvError::dim("appended key", self.head_dim(), key.len()));
        }
        if value.len() != self.head_dim() {
            return Err(KvError::dim("appended value", self.head_dim(), value.len()));
        }
        self.keys.push_row(key)?;
        self.values.push_row(value)
    }
}

/// Per-layer cache, one [`HeadCache`] per KV head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKV {
    pub heads: Vec<HeadCache>,
}

impl LayerKV {
    pub fn new(num_kv_heads: usize, head_dim: usize) -> Self {
        LayerKV {
            heads: (0..num_kv_heads).map(|_| HeadCache::new(head_dim)).collect(),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.heads.first().map(HeadCache::seq_len).unwrap_or(0)
    }

    /// Appends one token to every head. On error the cache is left unchanged.
    pub fn append<K: AsRef<[f64]>, V: AsRef<[f64]>>(
        &mut self,
        new_keys: &[K],
        new_values: &[V],
    ) -> Result<()> {
        if new_keys.len() != self.heads.len() {
            return Err(KvError::dim("kv heads in key", self.heads.len(), new_keys.len()));
        }
        if new_values.len() != self.heads.len() {
            return Err(KvError::dim(
                "kv heads in value",
                self.heads.len(),
                new_values.len(),
            ));
        }
        for (head, (k, v)) in self.heads.iter().zip(new_keys.iter().zip(new_values)) {
            let d = head.head_dim();
            if k.as_ref().len() != d {
                return Err(KvError::dim("appended key", d, k.as_ref().len()));
            }
            if v.as_ref().len() != d {
                return Err(KvError::dim("appended value", d, v.as_ref().len()));
            }
        }
        for (head, (k, v)) in self.heads.iter_mut().zip(new_keys.iter().zip(new_values)) {
            head.append(k.as_ref(), v.as_ref())?;
        }
        Ok(())
    }
}

/// Inputs for one layer at one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStep {
    /// One `[head_dim]` vector per query head.
    pub queries: Vec<Vec<f64>>,
    /// Residual-stream state entering this layer, `[hidden_dim]`.
    pub hidden_state: Vec<f64>,
    pub new_keys: Vec<Vec<f64>>,
    pub new_values: Vec<Vec<f64>>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(KvError::NonFinite(what))
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    out
}

/// Scaled logits `q K^T / sqrt(head_dim)`.
pub fn attention_logits(query: &[f64], keys: &Matrix) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(KvError::EmptyCache);
    }
    if query.len() != keys.cols() {
        return Err(KvError::dim("query width", keys.cols(), query.len()));
    }
    check_finite(query, "query")?;
    let scale = 1.0 / (keys.cols() as f64).sqrt();
    let logits: Vec<f64> = keys.iter_rows().map(|k| dot(query, k) * scale).collect();
    check_finite(&logits, "attention logits")?;
    Ok(logits)
}

pub fn attention_weights(query: &[f64], keys: &Matrix) -> Result<Vec<f64>> {
    Ok(softmax(&attention_logits(query, keys)?))
}

/// `weights · V`.
pub fn weighted_sum(weights: &[f64], values: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; values.cols()];
    for (w, row) in weights.iter().zip(values.iter_rows()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    out
}

pub fn exact_attention(query: &[f64], head: &HeadCache) -> Result<Vec<f64>> {
    let weights = attention_weights(query, &head.keys)?;
    Ok(weighted_sum(&weights, &head.values))
}

/// Exact attention for every query head of a layer; output is `[h_q][head_dim]`.
pub fn layer_attention(
    config: &ModelConfig,
    queries: &[Vec<f64>],
    layer: &LayerKV,
) -> Result<Vec<Vec<f64>>> {
    if queries.len() != config.num_query_heads {
        return Err(KvError::dim(
            "query heads",
            config.num_query_heads,
            queries.len(),
        ));
    }
    if layer.heads.len() != config.num_kv_heads {
        return Err(KvError::dim("kv heads", config.num_kv_heads, layer.heads.len()));
    }
    queries
        .iter()
        .enumerate()
        .map(|(h, q)| exact_attention(q, &layer.heads[config.kv_head_of(h)]))
        .collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    // Three-loop attention written independently of the library path.
    fn naive_attention(q: &[f64], k: &Matrix, v: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let d = q.len();
        let mut logits = vec![0.0; k.rows()];
        for j in 0..k.rows() {
            let mut acc = 0.0;
            for c in 0..d {
                acc += q[c] * k.get(j, c);
            }
            logits[j] = acc / (d as f64).sqrt();
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut out = vec![0.0; v.cols()];
        for c in 0..v.cols() {
            for j in 0..v.rows() {
                out[c] += w[j] * v.get(j, c);
            }
        }
        (w, out)
    }

    #[test]
    fn append_to_empty_cache() {
        let mut cache = LayerKV::new(1, 3);
        cache.append(&[vec![1.0, 2.0, 3.0]], &[vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(cache.seq_len(), 1);
        assert_eq!(cache.heads[0].keys.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn append_keeps_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cache = LayerKV::new(2, 4);
        for _ in 0..3 {
            let k: Vec<Vec<f64>> = (0..2).map(|_| random_matrix(&mut rng, 1, 4).row(0).to_vec()).collect();
            cache.append(&k, &k).unwrap();
        }
        let before = cache.clone();
        cache.append(&[vec![9.0; 4], vec![8.0; 4]], &[vec![7.0; 4], vec![6.0; 4]]).unwrap();
        assert_eq!(cache.seq_len(), 4);
        for h in 0..2 {
            for r in 0..3 {
                assert_eq!(cache.heads[h].keys.row(r), before.heads[h].keys.row(r));
                assert_eq!(cache.heads[h].values.row(r), before.heads[h].values.row(r));
            }
        }
        assert_eq!(cache.heads[1].keys.row(3), &[8.0; 4]);
    }

    #[test]
    fn sequential_appends_match_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let keys = random_matrix(&mut rng, 1000, 8);
        let values = random_matrix(&mut rng, 1000, 8);
        let mut cache = LayerKV::new(1, 8);
        for i in 0..1000 {
            cache.append(&[keys.row(i)], &[values.row(i)]).unwrap();
        }
        let batch = HeadCache::from_parts(keys, values).unwrap();
        assert_eq!(cache.heads[0], batch);
    }

    #[test]
    fn append_shape_mismatch() {
        let mut cache = LayerKV::new(1, 3);
        let err = cache.append(&[vec![1.0, 2.0]], &[vec![1.0, 2.0, 3.0]]).unwrap_err();
        assert!(matches!(err, KvError::Dimension { .. }));
        assert_eq!(cache.seq_len(), 0);
        assert!(cache.append(&[vec![0.0; 3], vec![0.0; 3]], &[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn single_token_returns_value_row() {
        let head = HeadCache::from_parts(
            Matrix::from_rows(&[vec![0.3, -1.0]]).unwrap(),
            Matrix::from_rows(&[vec![5.0, -7.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(exact_attention(&[10.0, 3.0], &head).unwrap(), vec![5.0, -7.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let keys = Matrix::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap();
        let values =
            Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 4.0], vec![5.0, 8.0], vec![7.0, 0.0]])
                .unwrap();
        let head = HeadCache::from_parts(keys, values).unwrap();
        let out = exact_attention(&[0.7, -0.1], &head).unwrap();
        assert!((out[0] - 4.0).abs() < 1e-12);
        assert!((out[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let k = random_matrix(&mut rng, 16, 4);
            let v = random_matrix(&mut rng, 16, 4);
            let q = random_matrix(&mut rng, 1, 4).row(0).to_vec();
            let (w_ref, o_ref) = naive_attention(&q, &k, &v);
            let w = attention_weights(&q, &k).unwrap();
            assert!(max_abs_diff(&w, &w_ref) < 1e-6);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let o = exact_attention(&q, &HeadCache::from_parts(k, v).unwrap()).unwrap();
            assert!(max_abs_diff(&o, &o_ref) < 1e-6);
        }
    }

    #[test]
    fn weights_edge_cases() {
        let keys = Matrix::from_rows(&vec![vec![1.0, 1.0]; 5]).unwrap();
        let w = attention_weights(&[2.0, -1.0], &keys).unwrap();
        for x in w {
            assert!((x - 0.2).abs() < 1e-12);
        }
        // a +1000 logit saturates the softmax
        let mut rows = vec![vec![0.0]; 6];
        rows[2] = vec![1000.0];
        let w = attention_weights(&[1.0], &Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!(w[2] >= 1.0 - 1e-6);
    }

    #[test]
    fn empty_and_nan_inputs() {
        let empty = HeadCache::new(2);
        assert!(matches!(exact_attention(&[1.0, 0.0], &empty), Err(KvError::EmptyCache)));
        let keys = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            attention_weights(&[f64::NAN, 0.0], &keys),
            Err(KvError::NonFinite(_))
        ));
    }

    #[test]
    fn gqa_groups_share_kv_head() {
        let cfg = ModelConfig::new(1, 4, 2, 2).unwrap();
        let mut layer = LayerKV::new(2, 2);
        layer
            .append(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 2.0], vec![3.0, 4.0]])
            .unwrap();
        let out = layer_attention(&cfg, &vec![vec![1.0, 1.0]; 4], &layer).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], vec![1.0, 2.0]);
        assert_eq!(out[1], vec![1.0, 2.0]);
        assert_eq!(out[2], vec![3.0, 4.0]);
        assert_eq!(out[3], vec![3.0, 4.0]);
        assert!(ModelConfig::new(1, 3, 2, 4).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..40),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&logits);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let b = softmax(&shifted);
            proptest::prop_assert!(max_abs_diff(&a, &b) < 1e-6);
        }

        #[test]
        fn append_then_attend_is_referentially_transparent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..30);
            let k = random_matrix(&mut rng, n, 4);
            let v = random_matrix(&mut rng, n, 4);
            let q = random_matrix(&mut rng, 1, 4).row(0).to_vec();
            let mut inc = HeadCache::new(4);
            for i in 0..n {
                inc.append(k.row(i), v.row(i)).unwrap();
            }
            let batch = HeadCache::from_parts(k, v).unwrap();
            proptest::prop_assert_eq!(
                exact_attention(&q, &inc).unwrap(),
                exact_attention(&q, &batch).unwrap()
            );
        }
    }
}
