//! Closed-form KV memory accounting. All counts are integer-exact.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{KvError, Result};
use crate::identifier::LayerLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FootprintMethod {
    Original,
    SnapKv,
    Quest,
    /// Group-quantized layers (codes plus fp16 zero/scale per group).
    QuantLayers,
    /// Offloaded layers: only the critical-key buffer stays on device.
    SparseLayers,
}

impl FootprintMethod {
    pub fn name(self) -> &'static str {
        match self {
            FootprintMethod::Original => "original",
            FootprintMethod::SnapKv => "snapkv",
            FootprintMethod::Quest => "quest",
            FootprintMethod::QuantLayers => "quant-layers",
            FootprintMethod::SparseLayers => "sparse-layers",
        }
    }
}

/// Inputs to [`memory_footprint`]. `num_kv_heads` is the `h` of every formula.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FootprintParams {
    pub num_layers: u64,
    pub seq_len: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub element_bytes: u64,
    /// Kept fraction for SnapKV, as `numerator / denominator`.
    pub budget: Option<(u64, u64)>,
    pub page_size: Option<u64>,
    pub quant_layers: Option<u64>,
    pub group_size: Option<u64>,
    pub bits: Option<u64>,
    pub critical_channels: Option<u64>,
}

fn need<T: Copy>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| KvError::Parameter(format!("missing footprint parameter `{name}`")))
}

fn ceil_div(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

fn to_u64(v: u128) -> Result<u64> {
    u64::try_from(v).map_err(|_| KvError::Parameter("footprint overflows u64".into()))
}

/// Bytes of KV state kept on device by `method`.
pub fn memory_footprint(method: FootprintMethod, p: &FootprintParams) -> Result<u64> {
    let (l, n, h, dh, eb) = (
        p.num_layers as u128,
        p.seq_len as u128,
        p.num_kv_heads as u128,
        p.head_dim as u128,
        p.element_bytes as u128,
    );
    let full = 2 * l * n * h * dh;
    let elements = match method {
        FootprintMethod::Original => full,
        FootprintMethod::SnapKv => {
            let (num, den) = need(p.budget, "budget")?;
            if den == 0 || num > den {
                return Err(KvError::Parameter(format!("budget {num}/{den} outside [0, 1]")));
            }
            ceil_div(full * num as u128, den as u128)
        }
        FootprintMethod::Quest => {
            let beta = need(p.page_size, "page_size")?;
            if beta == 0 {
                return Err(KvError::Parameter("page_size must be positive".into()));
            }
            full + ceil_div(full, beta as u128)
        }
        FootprintMethod::QuantLayers => {
            let lq = need(p.quant_layers, "quant_layers")? as u128;
            let g = need(p.group_size, "group_size")? as u128;
            let b = p.bits.unwrap_or(1) as u128;
            if g == 0 || !(1..=2).contains(&b) {
                return Err(KvError::Parameter(format!("group_size {g}, bits {b}")));
            }
            // b/16 of the fp16 payload plus one zero and one scale per g elements
            ceil_div(2 * lq * n * h * dh * (b * g + 32), 16 * g)
        }
        FootprintMethod::SparseLayers => {
            let ds = need(p.critical_channels, "critical_channels")? as u128;
            2 * n * h * ds
        }
    };
    to_u64(elements * eb)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub method: String,
    /// `None` for whole-model rows.
    pub layer: Option<usize>,
    pub bytes: u64,
}

/// Per-layer device bytes for a labelled model, followed by totals.
///
/// Rows: one `quant-layers` (or `original`, when `bits` is 16) or
/// `sparse-layers` row per layer, one
/// `local-window` row per S layer, then `hybrid-total` (layers only),
/// `local-window-total` and `original`.
pub fn hybrid_footprint(labels: &[LayerLabel], p: &FootprintParams, n_local: u64) -> Result<Vec<FootprintRow>> {
    let one = FootprintParams { num_layers: 1, quant_layers: Some(1), ..p.clone() };
    let window = n_local.min(p.seq_len) * 2 * p.num_kv_heads * p.head_dim * p.element_bytes;
    let mut rows = Vec::new();
    let (mut total, mut window_total) = (0u64, 0u64);
    for (l, label) in labels.iter().enumerate() {
        let method = match label {
            // 16-bit passthrough keeps the layer uncompressed
            LayerLabel::QuantizationFriendly if p.bits == Some(16) => FootprintMethod::Original,
            LayerLabel::QuantizationFriendly => FootprintMethod::QuantLayers,
            LayerLabel::SparsityFriendly => FootprintMethod::SparseLayers,
        };
        let bytes = memory_footprint(method, &one)?;
        total += bytes;
        rows.push(FootprintRow { method: method.name().into(), layer: Some(l), bytes });
        if *label == LayerLabel::SparsityFriendly {
            window_total += window;
            rows.push(FootprintRow { method: "local-window".into(), layer: Some(l), bytes: window });
        }
    }
    let original = memory_footprint(
        FootprintMethod::Original,
        &FootprintParams { num_layers: labels.len() as u64, ..p.clone() },
    )?;
    rows.push(FootprintRow { method: "hybrid-total".into(), layer: None, bytes: total });
    rows.push(FootprintRow { method: "local-window-total".into(), layer: None, bytes: window_total });
    rows.push(FootprintRow { method: "original".into(), layer: None, bytes: original });
    Ok(rows)
}

/// CSV with header `method,layer,bytes`; whole-model rows leave `layer` empty.
pub fn write_footprint_csv<W: Write>(rows: &[FootprintRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "layer", "bytes"])?;
    for r in rows {
        let layer = r.layer.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([r.method.as_str(), layer.as_str(), r.bytes.to_string().as_str()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identifier::LayerLabel::{QuantizationFriendly as Q, SparsityFriendly as S};

    fn base(l: u64, n: u64, h: u64, dh: u64) -> FootprintParams {
        FootprintParams { num_layers: l, seq_len: n, num_kv_heads: h, head_dim: dh, element_bytes: 2, ..Default::default() }
    }

    #[test]
    fn original_256_gb() {
        let b = memory_footprint(FootprintMethod::Original, &base(32, 524_288, 32, 128)).unwrap();
        assert_eq!(b, 274_877_906_944);
        assert_eq!(b, 256 * (1u64 << 30));
    }

    #[test]
    fn sparse_layer_example() {
        let p = FootprintParams { critical_channels: Some(12), ..base(1, 131_072, 8, 128) };
        assert_eq!(memory_footprint(FootprintMethod::SparseLayers, &p).unwrap(), 50_331_648);
    }

    #[test]
    fn quant_layer_example() {
        let p = FootprintParams { quant_layers: Some(1), group_size: Some(64), bits: Some(1), ..base(1, 131_072, 8, 128) };
        assert_eq!(memory_footprint(FootprintMethod::QuantLayers, &p).unwrap(), 50_331_648);
    }

    #[test]
    fn quant_compression_factor_is_32_over_3() {
        // 1 / (1/16 + 2/64) = 32/3
        let p = FootprintParams { quant_layers: Some(1), group_size: Some(64), bits: Some(1), ..base(1, 4096, 8, 128) };
        let orig = memory_footprint(FootprintMethod::Original, &p).unwrap();
        let quant = memory_footprint(FootprintMethod::QuantLayers, &p).unwrap();
        assert_eq!(orig * 3, quant * 32);
    }

    #[test]
    fn two_bit_doubles_payload_term() {
        let p = FootprintParams { quant_layers: Some(1), group_size: Some(64), bits: Some(2), ..base(1, 1024, 1, 64) };
        // 2·1024·64·(2/16 + 2/64) elements
        let e = 2 * 1024 * 64 / 8 + 2 * 1024 * 64 / 32;
        assert_eq!(memory_footprint(FootprintMethod::QuantLayers, &p).unwrap(), e * 2);
    }

    #[test]
    fn snapkv_and_quest() {
        let p = FootprintParams { budget: Some((1, 4)), page_size: Some(16), ..base(2, 1000, 4, 64) };
        let full = 2 * 2 * 1000 * 4 * 64;
        assert_eq!(memory_footprint(FootprintMethod::SnapKv, &p).unwrap(), full / 4 * 2);
        assert_eq!(memory_footprint(FootprintMethod::Quest, &p).unwrap(), (full + full / 16) * 2);
    }

    #[test]
    fn missing_parameters() {
        let p = base(1, 16, 1, 8);
        for m in [FootprintMethod::SnapKv, FootprintMethod::Quest, FootprintMethod::QuantLayers, FootprintMethod::SparseLayers] {
            assert!(matches!(memory_footprint(m, &p), Err(KvError::Parameter(_))), "{m:?}");
        }
    }

    #[test]
    fn hybrid_rows_and_csv() {
        let p = FootprintParams {
            quant_layers: Some(1),
            group_size: Some(64),
            bits: Some(1),
            critical_channels: Some(12),
            ..base(4, 131_072, 8, 128)
        };
        let rows = hybrid_footprint(&[Q, S, S, S], &p, 64).unwrap();
        let total = rows.iter().find(|r| r.method == "hybrid-total").unwrap().bytes;
        assert_eq!(total, 4 * 50_331_648);
        let window = rows.iter().find(|r| r.method == "local-window-total").unwrap().bytes;
        assert_eq!(window, 3 * 64 * 2 * 8 * 128 * 2);
        let mut buf = Vec::new();
        write_footprint_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,layer,bytes\n"));
        assert!(text.contains("quant-layers,0,50331648\n"));
        assert!(text.contains("hybrid-total,,201326592\n"));
        assert_eq!(text.lines().count(), 1 + rows.len());
    }
}
