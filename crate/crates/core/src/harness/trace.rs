//! Binary trace container.
//!
//! Layout:
//!
//! ```text
//! b"KVTRACE\0"            8 bytes
//! header length           u64 little-endian
//! header                  UTF-8 JSON
//! payload                 f16 little-endian, row-major, sections in header order
//! ```
//!
//! The header lists every section with its shape and carries the SHA-256 of
//! the payload. Sections appear in a fixed order derived from the model
//! dimensions; see [`section_layout`].

use std::io::{Read, Write};
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SyntheticSpec;
use crate::error::{KvError, Result};
use crate::identifier::LayerLabel;
use crate::kv_model::{DecodeStep, HeadCache, LayerKV, Matrix, ModelConfig};

pub const MAGIC: &[u8; 8] = b"KVTRACE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Section {
    fn new(name: String, shape: Vec<usize>) -> Self {
        Section { name, shape }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub prefill_len: usize,
    /// Trailing prompt positions whose queries are stored for calibration.
    pub prefill_query_rows: usize,
    pub decode_steps: usize,
    #[serde(default)]
    pub generator: Option<SyntheticSpec>,
    #[serde(default)]
    pub labels: Option<Vec<LayerLabel>>,
    pub sections: Vec<Section>,
    /// Hex SHA-256 of the payload.
    pub digest: String,
}

/// Prompt-time data of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayer {
    /// `[hidden_dim x hidden_dim]`, `q = hidden · w_q`.
    pub w_q: Matrix,
    pub prefill: LayerKV,
    /// One `[prefill_query_rows x head_dim]` matrix per query head.
    pub prefill_queries: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub layers: Vec<TraceLayer>,
    /// `steps[t][l]`.
    pub steps: Vec<Vec<DecodeStep>>,
}

/// Canonical section list.
pub fn section_layout(model: &ModelConfig, prefill_len: usize, query_rows: usize, steps: usize) -> Vec<Section> {
    let (d, h, hq, dh) = (model.hidden_dim(), model.num_kv_heads, model.num_query_heads, model.head_dim);
    let mut s = Vec::new();
    for l in 0..model.num_layers {
        s.push(Section::new(format!("layer{l}.w_q"), vec![d, d]));
        s.push(Section::new(format!("layer{l}.prefill.keys"), vec![h, prefill_len, dh]));
        s.push(Section::new(format!("layer{l}.prefill.values"), vec![h, prefill_len, dh]));
        s.push(Section::new(format!("layer{l}.prefill.queries"), vec![hq, query_rows, dh]));
    }
    for t in 0..steps {
        for l in 0..model.num_layers {
            s.push(Section::new(format!("step{t}.layer{l}.hidden"), vec![d]));
            s.push(Section::new(format!("step{t}.layer{l}.queries"), vec![hq, dh]));
            s.push(Section::new(format!("step{t}.layer{l}.new_keys"), vec![h, dh]));
            s.push(Section::new(format!("step{t}.layer{l}.new_values"), vec![h, dh]));
        }
    }
    s
}

/// Rounds to the nearest f16. Values outside the f16 range are an error.
pub fn to_f16(x: f64) -> Result<f16> {
    let y = f16::from_f64(x);
    if !y.is_finite() {
        return Err(KvError::Encoding(format!("{x} is not representable as f16")));
    }
    Ok(y)
}

/// `x` rounded through f16 and back.
pub fn round_f16(x: f64) -> f64 {
    f16::from_f64(x).to_f64()
}

fn push_all(out: &mut Vec<u8>, xs: &[f64]) -> Result<()> {
    for &x in xs {
        out.extend_from_slice(&to_f16(x)?.to_le_bytes());
    }
    Ok(())
}

impl Trace {
    pub fn model(&self) -> &ModelConfig {
        &self.header.model
    }

    fn check_shapes(&self) -> Result<()> {
        let h = &self.header;
        let m = &h.model;
        m.validate()?;
        let bad = |what: &str| Err(KvError::Trace(format!("inconsistent {what}")));
        if self.layers.len() != m.num_layers || self.steps.len() != h.decode_steps {
            return bad("layer or step count");
        }
        if h.prefill_query_rows > h.prefill_len {
            return bad("prefill query rows");
        }
        for layer in &self.layers {
            let d = m.hidden_dim();
            if layer.w_q.rows() != d || layer.w_q.cols() != d {
                return bad("w_q shape");
            }
            if layer.prefill.heads.len() != m.num_kv_heads
                || layer.prefill.heads.iter().any(|hc| hc.seq_len() != h.prefill_len || hc.head_dim() != m.head_dim)
            {
                return bad("prefill cache shape");
            }
            if layer.prefill_queries.len() != m.num_query_heads
                || layer
                    .prefill_queries
                    .iter()
                    .any(|q| q.rows() != h.prefill_query_rows || q.cols() != m.head_dim)
            {
                return bad("prefill query shape");
            }
        }
        for step in &self.steps {
            if step.len() != m.num_layers {
                return bad("step layer count");
            }
            for s in step {
                let vecs = |v: &[Vec<f64>], n: usize| v.len() == n && v.iter().all(|x| x.len() == m.head_dim);
                if s.hidden_state.len() != m.hidden_dim()
                    || !vecs(&s.queries, m.num_query_heads)
                    || !vecs(&s.new_keys, m.num_kv_heads)
                    || !vecs(&s.new_values, m.num_kv_heads)
                {
                    return bad("decode step shape");
                }
            }
        }
        if let Some(labels) = &h.labels {
            if labels.len() != m.num_layers {
                return bad("label count");
            }
        }
        Ok(())
    }

    fn payload(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            push_all(&mut out, layer.w_q.as_slice())?;
            for hc in &layer.prefill.heads {
                push_all(&mut out, hc.keys.as_slice())?;
            }
            for hc in &layer.prefill.heads {
                push_all(&mut out, hc.values.as_slice())?;
            }
            for q in &layer.prefill_queries {
                push_all(&mut out, q.as_slice())?;
            }
        }
        for step in &self.steps {
            for s in step {
                push_all(&mut out, &s.hidden_state)?;
                for group in [&s.queries, &s.new_keys, &s.new_values] {
                    for v in group {
                        push_all(&mut out, v)?;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Serializes the trace, filling in the section list and digest.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        let payload = self.payload()?;
        let mut header = self.header.clone();
        header.format_version = FORMAT_VERSION;
        header.sections =
            section_layout(&header.model, header.prefill_len, header.prefill_query_rows, header.decode_steps);
        header.digest = hex::encode(Sha256::digest(&payload));
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Trace> {
        let bad = |msg: String| KvError::Trace(msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing KVTRACE magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
        let header: TraceHeader =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        header.model.validate().map_err(|e| bad(e.to_string()))?;
        if header.prefill_query_rows > header.prefill_len {
            return Err(bad("more prefill query rows than prompt tokens".into()));
        }
        let expected = section_layout(&header.model, header.prefill_len, header.prefill_query_rows, header.decode_steps);
        if header.sections != expected {
            return Err(bad("section list does not match the declared dimensions".into()));
        }
        let payload = &bytes[hend..];
        let want: usize = expected.iter().map(Section::elements).sum::<usize>() * 2;
        if payload.len() != want {
            return Err(bad(format!("payload is {} bytes, sections need {want}", payload.len())));
        }
        if hex::encode(Sha256::digest(payload)) != header.digest {
            return Err(bad("payload digest mismatch".into()));
        }
        if let Some(labels) = &header.labels {
            if labels.len() != header.model.num_layers {
                return Err(bad("label count does not match layer count".into()));
            }
        }

        let mut vals = Vec::with_capacity(payload.len() / 2);
        for (i, c) in payload.chunks_exact(2).enumerate() {
            let v = f16::from_le_bytes([c[0], c[1]]);
            if !v.is_finite() {
                return Err(bad(format!("non-finite value at element {i}")));
            }
            vals.push(v.to_f64());
        }
        let mut cur = Reader { vals: &vals, pos: 0 };
        let m = header.model;
        let (d, dh, n, rows) = (m.hidden_dim(), m.head_dim, header.prefill_len, header.prefill_query_rows);
        let mut layers = Vec::with_capacity(m.num_layers);
        for _ in 0..m.num_layers {
            let w_q = cur.matrix(d, d)?;
            let keys: Vec<Matrix> = (0..m.num_kv_heads).map(|_| cur.matrix(n, dh)).collect::<Result<_>>()?;
            let values: Vec<Matrix> = (0..m.num_kv_heads).map(|_| cur.matrix(n, dh)).collect::<Result<_>>()?;
            let heads = keys
                .into_iter()
                .zip(values)
                .map(|(k, v)| HeadCache::from_parts(k, v))
                .collect::<Result<_>>()?;
            let prefill_queries = (0..m.num_query_heads).map(|_| cur.matrix(rows, dh)).collect::<Result<_>>()?;
            layers.push(TraceLayer { w_q, prefill: LayerKV { heads }, prefill_queries });
        }
        let mut steps = Vec::with_capacity(header.decode_steps);
        for _ in 0..header.decode_steps {
            let mut per_layer = Vec::with_capacity(m.num_layers);
            for _ in 0..m.num_layers {
                let hidden_state = cur.take(d).to_vec();
                let queries = (0..m.num_query_heads).map(|_| cur.take(dh).to_vec()).collect();
                let new_keys = (0..m.num_kv_heads).map(|_| cur.take(dh).to_vec()).collect();
                let new_values = (0..m.num_kv_heads).map(|_| cur.take(dh).to_vec()).collect();
                per_layer.push(DecodeStep { queries, hidden_state, new_keys, new_values });
            }
            steps.push(per_layer);
        }
        Ok(Trace { header, layers, steps })
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Trace> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Trace::from_bytes(&bytes)
    }

    pub fn load(path: &Path) -> Result<Trace> {
        Trace::from_bytes(&std::fs::read(path)?)
    }

    /// Cache of layer `l` after the prompt and the first `steps` decode tokens.
    pub fn cache_after(&self, layer: usize, steps: usize) -> Result<LayerKV> {
        let mut kv = self.layers[layer].prefill.clone();
        for s in &self.steps[..steps] {
            kv.append(&s[layer].new_keys, &s[layer].new_values)?;
        }
        Ok(kv)
    }
}

struct Reader<'a> {
    vals: &'a [f64],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> &[f64] {
        let s = &self.vals[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.take(rows * cols).to_vec())
    }
}
