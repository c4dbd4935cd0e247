//! Compute/transfer timeline of one or more decode steps.
//!
//! Two resources: the device compute stream and a single host-to-device link.
//! Events are placed by earliest-start list scheduling; among events that can
//! start at the same instant the lowest id goes first.

use serde::{Deserialize, Serialize};

use super::pool::LinkModel;
use crate::error::{KvError, Result};
use crate::identifier::LayerLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Compute,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferMode {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferAccess {
    pub slot: usize,
    pub mode: BufferMode,
}

pub mod labels {
    pub const QKV: &str = "qkv_proj";
    pub const ATTENTION: &str = "attention";
    pub const FFN: &str = "ffn";
    pub const ESTIMATE: &str = "estimate_channels";
    pub const PREFETCH: &str = "prefetch_critical_keys";
    pub const APPROX: &str = "approx_scores";
    pub const FETCH: &str = "fetch_topk";
    pub const SPARSE_ATTENTION: &str = "sparse_attention";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub id: usize,
    pub kind: EventKind,
    pub layer: usize,
    pub step: usize,
    pub label: String,
    pub start: f64,
    pub duration: f64,
    pub depends_on: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer: Option<BufferAccess>,
}

impl TimelineEvent {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferTimeline {
    pub events: Vec<TimelineEvent>,
}

const EPS: f64 = 1e-12;

impl TransferTimeline {
    pub fn new() -> Self {
        TransferTimeline::default()
    }

    /// Adds an unscheduled event and returns its id.
    pub fn push(
        &mut self,
        kind: EventKind,
        layer: usize,
        step: usize,
        label: &str,
        duration: f64,
        depends_on: Vec<usize>,
        buffer: Option<BufferAccess>,
    ) -> usize {
        let id = self.events.len();
        self.events.push(TimelineEvent {
            id,
            kind,
            layer,
            step,
            label: label.to_string(),
            start: 0.0,
            duration,
            depends_on,
            buffer,
        });
        id
    }

    /// Assigns start times. Fails if a dependency is unknown or cyclic.
    pub fn schedule(&mut self) -> Result<()> {
        let n = self.events.len();
        for e in &self.events {
            if !(e.duration >= 0.0) || !e.duration.is_finite() {
                return Err(KvError::Scheduling(format!("event {} has duration {}", e.id, e.duration)));
            }
            if let Some(&d) = e.depends_on.iter().find(|&&d| d >= n) {
                return Err(KvError::Scheduling(format!("event {} depends on unknown event {d}", e.id)));
            }
        }
        let mut end = vec![0.0; n];
        let mut done = vec![false; n];
        let mut free = [0.0f64; 2];
        let res = |k: EventKind| match k {
            EventKind::Compute => 0,
            EventKind::Transfer => 1,
        };
        for _ in 0..n {
            let mut best: Option<(f64, usize)> = None;
            for (i, e) in self.events.iter().enumerate() {
                if done[i] || !e.depends_on.iter().all(|&d| done[d]) {
                    continue;
                }
                let ready = e.depends_on.iter().map(|&d| end[d]).fold(0.0, f64::max);
                let start = ready.max(free[res(e.kind)]);
                if best.is_none_or(|(s, _)| start < s) {
                    best = Some((start, i));
                }
            }
            let (start, i) = best.ok_or_else(|| KvError::Scheduling("cyclic dependency between events".into()))?;
            let e = &mut self.events[i];
            e.start = start;
            end[i] = start + e.duration;
            free[res(e.kind)] = end[i];
            done[i] = true;
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.events.iter().map(TimelineEvent::end).fold(0.0, f64::max)
    }

    /// Longest dependency chain, ignoring resource contention.
    pub fn critical_path(&self) -> Result<f64> {
        let n = self.events.len();
        let mut indegree = vec![0usize; n];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.events {
            for &d in &e.depends_on {
                if d >= n {
                    return Err(KvError::Scheduling(format!("event {} depends on unknown event {d}", e.id)));
                }
                indegree[e.id] += 1;
                dependents[d].push(e.id);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut finish = vec![0.0f64; n];
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            let e = &self.events[i];
            finish[i] = e.depends_on.iter().map(|&d| finish[d]).fold(0.0, f64::max) + e.duration;
            for &j in &dependents[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push(j);
                }
            }
        }
        if seen != n {
            return Err(KvError::Scheduling("cyclic dependency between events".into()));
        }
        Ok(finish.into_iter().fold(0.0, f64::max))
    }

    /// Checks a scheduled timeline: dependencies respected, each resource runs
    /// one event at a time, critical-key slots are never read and written at
    /// once, and every Top-K fetch starts after its layer's scoring ends.
    pub fn verify(&self) -> Result<()> {
        for e in &self.events {
            for &d in &e.depends_on {
                if e.start + EPS < self.events[d].end() {
                    return Err(KvError::Scheduling(format!("event {} starts before dependency {d} ends", e.id)));
                }
            }
        }
        for kind in [EventKind::Compute, EventKind::Transfer] {
            let mut on: Vec<&TimelineEvent> = self.events.iter().filter(|e| e.kind == kind && e.duration > 0.0).collect();
            on.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in on.windows(2) {
                if w[1].start + EPS < w[0].end() {
                    return Err(KvError::Scheduling(format!("events {} and {} overlap on {kind:?}", w[0].id, w[1].id)));
                }
            }
        }
        let overlaps = |a: &TimelineEvent, b: &TimelineEvent| a.start + EPS < b.end() && b.start + EPS < a.end();
        for w in self.events.iter().filter(|e| matches!(e.buffer, Some(BufferAccess { mode: BufferMode::Write, .. }))) {
            let slot = w.buffer.unwrap().slot;
            for r in self.events.iter().filter(|e| e.buffer == Some(BufferAccess { slot, mode: BufferMode::Read })) {
                if overlaps(w, r) {
                    return Err(KvError::Scheduling(format!("slot {slot} written by {} while read by {}", w.id, r.id)));
                }
            }
        }
        for f in self.events.iter().filter(|e| e.label == labels::FETCH) {
            for s in self
                .events
                .iter()
                .filter(|e| e.label == labels::APPROX && e.layer == f.layer && e.step == f.step)
            {
                if f.start + EPS < s.end() {
                    return Err(KvError::Scheduling(format!(
                        "top-k fetch {} starts before scoring {} ends",
                        f.id, s.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Durations and transfer sizes of one layer for one decode step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCosts {
    pub label: LayerLabel,
    pub qkv: f64,
    /// Quantized attention for Q layers, sparse attention for S layers.
    pub attention: f64,
    pub ffn: f64,
    pub estimate: f64,
    pub approx_score: f64,
    pub critical_key_bytes: usize,
    pub topk_bytes: usize,
}

impl LayerCosts {
    pub fn compute_total(&self) -> f64 {
        match self.label {
            LayerLabel::QuantizationFriendly => self.qkv + self.attention + self.ffn,
            LayerLabel::SparsityFriendly => self.qkv + self.attention + self.ffn + self.estimate + self.approx_score,
        }
    }
}

/// Lays out `steps` decode steps. For an offloaded layer `l`, channel
/// estimation and the critical-key prefetch are issued while layer `l - 1`
/// runs; the Top-K fetch waits for `l`'s approximate scoring and gates its
/// sparse attention. Prefetches alternate between the two critical-key slots
/// and wait for the previous reader of their slot.
pub fn build_timeline(costs: &[LayerCosts], link: &LinkModel, steps: usize) -> Result<TransferTimeline> {
    use EventKind::*;
    let mut t = TransferTimeline::new();
    let mut prev_out: Vec<usize> = Vec::new();
    let mut last_reader: [Option<usize>; 2] = [None, None];
    let mut next_slot = 0usize;

    let mut stage_one = |t: &mut TransferTimeline, step: usize, l: usize, deps: Vec<usize>, last_reader: &[Option<usize>; 2]| {
        let c = &costs[l];
        let est = t.push(Compute, l, step, labels::ESTIMATE, c.estimate, deps, None);
        let slot = next_slot;
        next_slot = 1 - next_slot;
        let mut pdeps = vec![est];
        pdeps.extend(last_reader[slot]);
        let pf = t.push(
            Transfer,
            l,
            step,
            labels::PREFETCH,
            link.transfer_seconds(c.critical_key_bytes),
            pdeps,
            Some(BufferAccess { slot, mode: BufferMode::Write }),
        );
        (pf, slot)
    };

    for step in 0..steps {
        // (prefetch event, slot) per layer for this step
        let mut staged: Vec<Option<(usize, usize)>> = vec![None; costs.len()];
        if costs.first().map(|c| c.label) == Some(LayerLabel::SparsityFriendly) {
            staged[0] = Some(stage_one(&mut t, step, 0, prev_out.clone(), &last_reader));
        }
        for (l, c) in costs.iter().enumerate() {
            if costs.get(l + 1).map(|n| n.label) == Some(LayerLabel::SparsityFriendly) {
                staged[l + 1] = Some(stage_one(&mut t, step, l + 1, prev_out.clone(), &last_reader));
            }
            let qkv = t.push(Compute, l, step, labels::QKV, c.qkv, prev_out.clone(), None);
            let attn = match c.label {
                LayerLabel::QuantizationFriendly => t.push(Compute, l, step, labels::ATTENTION, c.attention, vec![qkv], None),
                LayerLabel::SparsityFriendly => {
                    let (pf, slot) = staged[l]
                        .take()
                        .ok_or_else(|| KvError::Scheduling(format!("no critical-key prefetch issued for layer {l}")))?;
                    let approx = t.push(
                        Compute,
                        l,
                        step,
                        labels::APPROX,
                        c.approx_score,
                        vec![qkv, pf],
                        Some(BufferAccess { slot, mode: BufferMode::Read }),
                    );
                    last_reader[slot] = Some(approx);
                    let fetch = t.push(Transfer, l, step, labels::FETCH, link.transfer_seconds(c.topk_bytes), vec![approx], None);
                    t.push(Compute, l, step, labels::SPARSE_ATTENTION, c.attention, vec![fetch], None)
                }
            };
            let ffn = t.push(Compute, l, step, labels::FFN, c.ffn, vec![attn], None);
            prev_out = vec![ffn];
        }
    }
    t.schedule()?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBreakdown {
    pub layer: usize,
    pub compute: f64,
    pub transfer: f64,
    /// Transfer time not hidden behind compute.
    pub exposed_transfer: f64,
    /// Time the approximate scoring waited on a late prefetch.
    pub prefetch_stall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub total: f64,
    pub compute: f64,
    pub transfer: f64,
    pub critical_path: f64,
    /// Fraction of transfer time overlapped with compute.
    pub overlap_fraction: f64,
    pub per_layer: Vec<LayerBreakdown>,
}

/// Length of `[start, end)` covered by the union of `intervals` (sorted by start).
fn covered(start: f64, end: f64, intervals: &[(f64, f64)]) -> f64 {
    intervals
        .iter()
        .map(|&(a, b)| (b.min(end) - a.max(start)).max(0.0))
        .sum()
}

/// Schedules the timeline, checks its invariants and summarizes it.
pub fn simulate(timeline: &TransferTimeline) -> Result<(TransferTimeline, SimulationReport)> {
    let mut t = timeline.clone();
    t.schedule()?;
    t.verify()?;
    let compute_iv: Vec<(f64, f64)> = t
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Compute && e.duration > 0.0)
        .map(|e| (e.start, e.end()))
        .collect();
    let num_layers = t.events.iter().map(|e| e.layer + 1).max().unwrap_or(0);
    let mut per_layer: Vec<LayerBreakdown> = (0..num_layers)
        .map(|layer| LayerBreakdown { layer, compute: 0.0, transfer: 0.0, exposed_transfer: 0.0, prefetch_stall: 0.0 })
        .collect();
    let (mut compute, mut transfer, mut hidden) = (0.0, 0.0, 0.0);
    for e in &t.events {
        let b = &mut per_layer[e.layer];
        match e.kind {
            EventKind::Compute => {
                compute += e.duration;
                b.compute += e.duration;
            }
            EventKind::Transfer => {
                // compute events never overlap each other, so coverage adds up
                let h = covered(e.start, e.end(), &compute_iv);
                transfer += e.duration;
                hidden += h;
                b.transfer += e.duration;
                b.exposed_transfer += e.duration - h;
            }
        }
        if e.label == labels::APPROX {
            let (mut pf_end, mut other_end) = (0.0f64, 0.0f64);
            for &d in &e.depends_on {
                let dep = &t.events[d];
                if dep.label == labels::PREFETCH {
                    pf_end = pf_end.max(dep.end());
                } else {
                    other_end = other_end.max(dep.end());
                }
            }
            b.prefetch_stall += (pf_end - other_end).max(0.0);
        }
    }
    let report = SimulationReport {
        total: t.total(),
        compute,
        transfer,
        critical_path: t.critical_path()?,
        overlap_fraction: if transfer > 0.0 { hidden / transfer } else { 1.0 },
        per_layer,
    };
    Ok((t, report))
}
