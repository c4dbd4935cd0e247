use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{KvError, Result};
use crate::kv_model::{HeadCache, LayerKV, Matrix, ELEMENT_BYTES};
use crate::retriever::{ChannelMax, CriticalChannelSet};

/// First-order host-to-device link: `duration = base_latency + bytes / bandwidth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds added to every non-empty transfer.
    pub base_latency: f64,
}

impl LinkModel {
    pub fn new(bandwidth: f64, base_latency: f64) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(KvError::Config(format!("link bandwidth must be positive, got {bandwidth}")));
        }
        if !(base_latency >= 0.0) {
            return Err(KvError::Config(format!("link latency must be non-negative, got {base_latency}")));
        }
        Ok(LinkModel { bandwidth, base_latency })
    }

    /// 4 GB/s link.
    pub fn pcie_4gbps() -> Self {
        LinkModel { bandwidth: 4e9, base_latency: 10e-6 }
    }

    /// 32 GB/s link.
    pub fn pcie_32gbps() -> Self {
        LinkModel { bandwidth: 32e9, base_latency: 10e-6 }
    }

    pub fn transfer_seconds(&self, bytes: usize) -> f64 {
        if bytes == 0 {
            0.0
        } else {
            self.base_latency + bytes as f64 / self.bandwidth
        }
    }
}

/// A completed host-to-device copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub layer: usize,
    pub label: String,
    pub bytes: usize,
    pub duration: f64,
    /// Critical-key slot written, for prefetches.
    pub slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OffloadedLayer {
    heads: Vec<HeadCache>,
    channel_max: Vec<ChannelMax>,
}

/// Host memory holding the full caches of offloaded layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HostPool {
    layers: BTreeMap<usize, OffloadedLayer>,
}

impl HostPool {
    pub fn new() -> Self {
        HostPool::default()
    }

    pub fn offload_layer(&mut self, layer: usize, cache: &LayerKV) -> Result<()> {
        if self.layers.contains_key(&layer) {
            return Err(KvError::Parameter(format!("layer {layer} is already offloaded")));
        }
        let channel_max = cache.heads.iter().map(|h| ChannelMax::from_keys(&h.keys)).collect();
        self.layers.insert(
            layer,
            OffloadedLayer {
                heads: cache.heads.clone(),
                channel_max,
            },
        );
        Ok(())
    }

    fn layer(&self, layer: usize) -> Result<&OffloadedLayer> {
        self.layers
            .get(&layer)
            .ok_or_else(|| KvError::Parameter(format!("layer {layer} is not offloaded")))
    }

    fn head(&self, layer: usize, head: usize) -> Result<&HeadCache> {
        let l = self.layer(layer)?;
        l.heads
            .get(head)
            .ok_or_else(|| KvError::Parameter(format!("kv head {head} out of range")))
    }

    pub fn is_offloaded(&self, layer: usize) -> bool {
        self.layers.contains_key(&layer)
    }

    pub fn seq_len(&self, layer: usize) -> Result<usize> {
        Ok(self.layer(layer)?.heads.first().map(HeadCache::seq_len).unwrap_or(0))
    }

    pub fn num_heads(&self, layer: usize) -> Result<usize> {
        Ok(self.layer(layer)?.heads.len())
    }

    /// Appends a decoded token and updates the channel maxima.
    pub fn append<K: AsRef<[f64]>, V: AsRef<[f64]>>(&mut self, layer: usize, keys: &[K], values: &[V]) -> Result<()> {
        let l = self
            .layers
            .get_mut(&layer)
            .ok_or_else(|| KvError::Parameter(format!("layer {layer} is not offloaded")))?;
        let mut cache = LayerKV { heads: std::mem::take(&mut l.heads) };
        let res = cache.append(keys, values);
        l.heads = cache.heads;
        res?;
        for (m, k) in l.channel_max.iter_mut().zip(keys) {
            m.update(k.as_ref());
        }
        Ok(())
    }

    pub fn channel_max(&self, layer: usize, head: usize) -> Result<&[f64]> {
        let l = self.layer(layer)?;
        l.channel_max
            .get(head)
            .map(ChannelMax::as_slice)
            .ok_or_else(|| KvError::Parameter(format!("kv head {head} out of range")))
    }

    /// Key and value rows at `indices`, in the requested order.
    pub fn gather(&self, layer: usize, head: usize, indices: &[usize]) -> Result<(Matrix, Matrix)> {
        let h = self.head(layer, head)?;
        Ok((h.keys.gather_rows(indices)?, h.values.gather_rows(indices)?))
    }

    /// Key columns `channels` for the first `rows` tokens.
    pub fn key_columns(&self, layer: usize, head: usize, channels: &[usize], rows: usize) -> Result<Matrix> {
        let h = self.head(layer, head)?;
        if rows > h.seq_len() {
            return Err(KvError::Parameter(format!("{rows} rows requested from {} tokens", h.seq_len())));
        }
        h.keys.slice_rows(0, rows).select_columns(channels)
    }

    pub fn head_cache(&self, layer: usize, head: usize) -> Result<&HeadCache> {
        self.head(layer, head)
    }

    pub fn fetch_topk(&self, layer: usize, head: usize, indices: &[usize], link: &LinkModel) -> Result<(Matrix, Matrix, Transfer)> {
        let (k, v) = self.gather(layer, head, indices)?;
        let bytes = 2 * indices.len() * k.cols() * ELEMENT_BYTES;
        let transfer = Transfer {
            layer,
            label: "fetch_topk".into(),
            bytes,
            duration: link.transfer_seconds(bytes),
            slot: None,
        };
        Ok((k, v, transfer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Empty,
    Sealed,
    Reading,
}

/// Critical key columns of one layer, per KV head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalKeys {
    pub layer: usize,
    pub channels: Vec<Vec<usize>>,
    pub keys: Vec<Matrix>,
}

/// Two critical-key slots: prefetches write one while attention reads the other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceBuffers {
    state: [SlotState; 2],
    data: [Option<CriticalKeys>; 2],
    next_write: usize,
}

impl Default for DeviceBuffers {
    fn default() -> Self {
        DeviceBuffers {
            state: [SlotState::Empty; 2],
            data: [None, None],
            next_write: 0,
        }
    }
}

impl DeviceBuffers {
    pub fn new() -> Self {
        DeviceBuffers::default()
    }

    pub fn state(&self, slot: usize) -> SlotState {
        self.state[slot]
    }

    pub fn next_write_slot(&self) -> usize {
        self.next_write
    }

    /// Copies the critical key columns of `layer` (first `rows` tokens) into
    /// the write slot and seals it.
    pub fn prefetch_critical_keys(
        &mut self,
        pool: &HostPool,
        layer: usize,
        channels: &[CriticalChannelSet],
        rows: usize,
        link: &LinkModel,
    ) -> Result<Transfer> {
        let slot = self.next_write;
        if self.state[slot] != SlotState::Empty {
            return Err(KvError::Scheduling(format!(
                "critical-key slot {slot} is busy ({:?})",
                self.state[slot]
            )));
        }
        if channels.len() != pool.num_heads(layer)? {
            return Err(KvError::dim("channel sets", pool.num_heads(layer)?, channels.len()));
        }
        let mut keys = Vec::with_capacity(channels.len());
        let mut bytes = 0;
        for (head, set) in channels.iter().enumerate() {
            let m = pool.key_columns(layer, head, &set.selected, rows)?;
            bytes += m.rows() * m.cols() * ELEMENT_BYTES;
            keys.push(m);
        }
        self.data[slot] = Some(CriticalKeys {
            layer,
            channels: channels.iter().map(|c| c.selected.clone()).collect(),
            keys,
        });
        self.state[slot] = SlotState::Sealed;
        self.next_write = 1 - slot;
        Ok(Transfer {
            layer,
            label: "prefetch_critical_keys".into(),
            bytes,
            duration: link.transfer_seconds(bytes),
            slot: Some(slot),
        })
    }

    /// Marks the sealed slot holding `layer` as being read and returns it.
    pub fn acquire(&mut self, layer: usize) -> Result<(usize, &CriticalKeys)> {
        let slot = (0..2)
            .find(|&s| self.state[s] == SlotState::Sealed && self.data[s].as_ref().map(|d| d.layer) == Some(layer))
            .ok_or_else(|| KvError::Scheduling(format!("no sealed critical keys for layer {layer}")))?;
        self.state[slot] = SlotState::Reading;
        Ok((slot, self.data[slot].as_ref().expect("sealed slot has data")))
    }

    pub fn release(&mut self, slot: usize) -> Result<()> {
        if self.state[slot] != SlotState::Reading {
            return Err(KvError::Scheduling(format!("slot {slot} released while {:?}", self.state[slot])));
        }
        self.state[slot] = SlotState::Empty;
        self.data[slot] = None;
        Ok(())
    }
}
