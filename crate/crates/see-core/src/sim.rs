//! Analytical cycle/latency model of the spatially-mapped sparse dataflow
//! accelerator: every layer is its own pipeline stage holding its weights
//! on-chip; steady-state throughput is set by the bottleneck stage, and the
//! GRU+FC head is a fixed CPU-side cost.
//!
//! First-order model: token-FIFO stalls and line-buffer refill beyond the
//! per-layer constant overhead are ignored.

use serde::{Deserialize, Serialize};

use crate::engine::BackboneStats;
use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerSpec, Model, ModelSpec};
use crate::tensor::SparseTensor;

/// MACs per cycle available to each layer kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeParallelism {
    pub conv1x1: u64,
    pub conv3x3: u64,
    pub dw3x3: u64,
    pub pool: u64,
}

impl PeParallelism {
    pub fn for_kind(&self, kind: LayerKind) -> u64 {
        match kind {
            LayerKind::Conv1x1 => self.conv1x1,
            LayerKind::SubmConv3x3 | LayerKind::StridedConv3x3 => self.conv3x3,
            LayerKind::SubmDw3x3 | LayerKind::StridedDw3x3 => self.dw3x3,
            LayerKind::GlobalAvgPool => self.pool,
        }
    }
}

impl Default for PeParallelism {
    fn default() -> Self {
        PeParallelism {
            conv1x1: 64,
            conv3x3: 64,
            dw3x3: 16,
            pool: 8,
        }
    }
}

/// Device-class description the latency model evaluates against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HwConfig {
    pub clock_hz: f64,
    pub pe: PeParallelism,
    /// On-chip capacity for backbone weights; default 4 MiB.
    pub weight_budget_bytes: u64,
    /// Per-layer pipeline constant (fill, FIFO, line-buffer priming).
    pub fifo_overhead_cycles: u64,
    /// Throughput of the CPU running the GRU+FC head.
    pub cpu_macs_per_sec: f64,
    /// When set, ignore `pe` and split this global MAC/cycle budget across
    /// layers proportionally to their work.
    pub auto_balance_macs_per_cycle: Option<u64>,
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig {
            clock_hz: 200e6,
            pe: PeParallelism::default(),
            weight_budget_bytes: 4 * 1024 * 1024,
            fifo_overhead_cycles: 64,
            cpu_macs_per_sec: 1e9,
            auto_balance_macs_per_cycle: None,
        }
    }
}

impl HwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clock_hz <= 0.0 || !self.clock_hz.is_finite() {
            return Err(Error::config("clock_hz must be positive"));
        }
        if self.cpu_macs_per_sec <= 0.0 || !self.cpu_macs_per_sec.is_finite() {
            return Err(Error::config("cpu_macs_per_sec must be positive"));
        }
        if self.weight_budget_bytes == 0 {
            return Err(Error::config("weight_budget_bytes must be positive"));
        }
        if [self.pe.conv1x1, self.pe.conv3x3, self.pe.dw3x3, self.pe.pool].contains(&0)
        {
            return Err(Error::config("pe parallelism must be positive"));
        }
        if self.auto_balance_macs_per_cycle == Some(0) {
            return Err(Error::config("auto-balance budget must be positive"));
        }
        Ok(())
    }
}

/// Expected workload of one layer: active output sites and mean active
/// kernel offsets per site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub active_sites: f64,
    pub mean_offsets: f64,
}

/// Per-layer workload expectations for one model, in derived-layer order
/// (global average pool included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub entries: Vec<LayerProfile>,
}

impl SparsityProfile {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let layers = spec.layers();
        if self.entries.len() != layers.len() {
            return Err(Error::argument(format!(
                "profile has {} entries, model derives {} layers",
                self.entries.len(),
                layers.len()
            )));
        }
        for (e, (geom, layer)) in self
            .entries
            .iter()
            .zip(spec.layer_geometries().iter().zip(&layers))
        {
            let cells = (geom.0 * geom.1) as f64;
            if !(0.0..=cells).contains(&e.active_sites) {
                return Err(Error::argument(format!(
                    "layer {}: active sites {} outside 0..={cells}",
                    layer.name, e.active_sites
                )));
            }
            if !(1.0..=9.0).contains(&e.mean_offsets) {
                return Err(Error::argument(format!(
                    "layer {}: mean offsets {} outside 1..=9",
                    layer.name, e.mean_offsets
                )));
            }
        }
        Ok(())
    }
}

/// Analytic sparsity assumption keyed by downsampling stage, usable for any
/// sampled architecture. Stage s is the grid after s stride-2 layers; the
/// last entries repeat for deeper stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparsityModel {
    pub stage_density: Vec<f64>,
    pub stage_offsets: Vec<f64>,
}

impl Default for SparsityModel {
    fn default() -> Self {
        // Event-data-like: sparse at full resolution, densifying with depth.
        SparsityModel {
            stage_density: vec![0.05, 0.15, 0.35, 0.6, 0.8],
            stage_offsets: vec![2.5, 4.0, 5.5, 7.0, 8.0],
        }
    }
}

impl SparsityModel {
    pub fn validate(&self) -> Result<()> {
        if self.stage_density.is_empty() || self.stage_offsets.is_empty() {
            return Err(Error::config("sparsity model needs at least one stage"));
        }
        if self.stage_density.iter().any(|&d| !(0.0..=1.0).contains(&d)) {
            return Err(Error::config("stage densities must lie in [0,1]"));
        }
        if self.stage_offsets.iter().any(|&o| !(1.0..=9.0).contains(&o)) {
            return Err(Error::config("stage offsets must lie in [1,9]"));
        }
        Ok(())
    }

    fn stage(&self, values: &[f64], s: usize) -> f64 {
        values[s.min(values.len() - 1)]
    }

    /// Materialize a per-layer profile for one architecture.
    pub fn profile_for(&self, spec: &ModelSpec) -> Result<SparsityProfile> {
        self.validate()?;
        spec.validate()?;
        let mut stage = 0usize;
        let mut entries = Vec::new();
        for (layer, geom) in spec.layers().iter().zip(spec.layer_geometries()) {
            if layer.spec.kind.is_strided() {
                stage += 1;
            }
            let cells = (geom.0 * geom.1) as f64;
            let density = self.stage(&self.stage_density, stage);
            let offsets = if layer.spec.kind.is_3x3() {
                self.stage(&self.stage_offsets, stage)
            } else {
                1.0
            };
            entries.push(LayerProfile {
                active_sites: density * cells,
                mean_offsets: offsets,
            });
        }
        Ok(SparsityProfile { entries })
    }
}

/// Work of one layer under a profile entry, in MAC-equivalents.
fn layer_work(spec: &LayerSpec, entry: &LayerProfile) -> f64 {
    let cin = spec.in_channels as f64;
    let cout = spec.out_channels as f64;
    match spec.kind {
        LayerKind::Conv1x1 => entry.active_sites * cin * cout,
        LayerKind::SubmConv3x3 | LayerKind::StridedConv3x3 => {
            entry.active_sites * entry.mean_offsets * cin * cout
        }
        LayerKind::SubmDw3x3 | LayerKind::StridedDw3x3 => {
            entry.active_sites * entry.mean_offsets * cin
        }
        LayerKind::GlobalAvgPool => entry.active_sites * cin,
    }
}

fn cycles_for(work: f64, parallelism: u64, overhead: u64) -> u64 {
    (work / parallelism as f64).ceil() as u64 + overhead
}

/// Cycle count of one layer: ceil(work / parallelism) + the per-layer FIFO
/// overhead. The offsets term is 1 for conv1x1.
pub fn layer_cycles(spec: &LayerSpec, entry: &LayerProfile, hw: &HwConfig) -> Result<u64> {
    hw.validate()?;
    let par = hw.pe.for_kind(spec.kind);
    Ok(cycles_for(layer_work(spec, entry), par, hw.fifo_overhead_cycles))
}

/// One row of a latency report.
#[derive(Debug, Clone, Serialize)]
pub struct LayerCycles {
    pub layer: String,
    pub kind: LayerKind,
    pub active: f64,
    pub offsets: f64,
    pub cycles: u64,
}

/// Latency breakdown of one model on one hardware config.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub layers: Vec<LayerCycles>,
    /// Index of the slowest pipeline stage.
    pub bottleneck: usize,
    /// Pipeline fill: sum of per-layer overheads.
    pub fill_cycles: u64,
    /// Bottleneck cycles + fill.
    pub scnn_cycles: u64,
    pub scnn_latency_s: f64,
    pub head_latency_s: f64,
    pub total_latency_s: f64,
    pub weight_bytes: u64,
}

impl LatencyReport {
    /// JSON document with one row per layer; schema documented in README.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// GRU+FC multiply-accumulate count for the head latency model.
pub fn head_macs(spec: &ModelSpec) -> u64 {
    let d = spec.embedding_len() as u64;
    let hd = spec.gru_hidden as u64;
    3 * (hd * d + hd * hd) + 2 * hd
}

/// Int8 deployment byte footprint of a layer list: one byte per weight, four
/// per bias, five per weighted layer for its dyadic requantization pair.
pub fn layers_footprint(layers: &[LayerSpec]) -> u64 {
    layers
        .iter()
        .filter(|l| l.has_weights())
        .map(|l| l.weight_count() as u64 + 4 * l.bias_count() as u64 + 5)
        .sum()
}

/// On-chip weight footprint of a whole model.
pub fn weight_footprint(spec: &ModelSpec) -> u64 {
    let specs: Vec<LayerSpec> = spec.layers().iter().map(|l| l.spec).collect();
    layers_footprint(&specs)
}

/// Evaluate the dataflow pipeline: per-layer cycles, bottleneck stage,
/// fill, and the CPU-side head latency.
pub fn model_latency(
    spec: &ModelSpec,
    profile: &SparsityProfile,
    hw: &HwConfig,
) -> Result<LatencyReport> {
    hw.validate()?;
    spec.validate()?;
    profile.validate(spec)?;
    let layers = spec.layers();

    let works: Vec<f64> = layers
        .iter()
        .zip(&profile.entries)
        .map(|(l, e)| layer_work(&l.spec, e))
        .collect();
    let rows: Vec<LayerCycles> = match hw.auto_balance_macs_per_cycle {
        None => layers
            .iter()
            .zip(&profile.entries)
            .zip(&works)
            .map(|((l, e), &work)| LayerCycles {
                layer: l.name.clone(),
                kind: l.spec.kind,
                active: e.active_sites,
                offsets: e.mean_offsets,
                cycles: cycles_for(work, hw.pe.for_kind(l.spec.kind), hw.fifo_overhead_cycles),
            })
            .collect(),
        Some(budget) => {
            let total: f64 = works.iter().sum();
            layers
                .iter()
                .zip(&profile.entries)
                .zip(&works)
                .map(|((l, e), &work)| {
                    let par = if total > 0.0 {
                        ((budget as f64 * work / total).floor() as u64).max(1)
                    } else {
                        1
                    };
                    LayerCycles {
                        layer: l.name.clone(),
                        kind: l.spec.kind,
                        active: e.active_sites,
                        offsets: e.mean_offsets,
                        cycles: cycles_for(work, par, hw.fifo_overhead_cycles),
                    }
                })
                .collect()
        }
    };

    let bottleneck = rows
        .iter()
        .enumerate()
        .max_by_key(|(_, r)| r.cycles)
        .map(|(i, _)| i)
        .unwrap();
    let fill_cycles = hw.fifo_overhead_cycles * rows.len() as u64;
    let scnn_cycles = rows[bottleneck].cycles + fill_cycles;
    let scnn_latency_s = scnn_cycles as f64 / hw.clock_hz;
    let head_latency_s = head_macs(spec) as f64 / hw.cpu_macs_per_sec;
    Ok(LatencyReport {
        layers: rows,
        bottleneck,
        fill_cycles,
        scnn_cycles,
        scnn_latency_s,
        head_latency_s,
        total_latency_s: scnn_latency_s + head_latency_s,
        weight_bytes: weight_footprint(spec),
    })
}

/// Measure a per-layer sparsity profile by running the real engine over
/// representative inputs and averaging the recorded active counts and
/// kernel-offset means.
pub fn measure_profile(model: &Model, inputs: &[SparseTensor<f32>]) -> Result<SparsityProfile> {
    if inputs.is_empty() {
        return Err(Error::argument("measure_profile needs at least one input"));
    }
    let layer_count = model.spec.layers().len();
    let mut active_total = vec![0u64; layer_count];
    let mut offsets_total = vec![0u64; layer_count];
    for input in inputs {
        let (_, stats) = crate::engine::run_backbone(model, input)?;
        let stats: &BackboneStats = &stats;
        debug_assert_eq!(stats.layers.len(), layer_count);
        for (i, l) in stats.layers.iter().enumerate() {
            active_total[i] += l.active_out as u64;
            offsets_total[i] += l.offsets_sum;
        }
    }
    let n = inputs.len() as f64;
    let entries = active_total
        .iter()
        .zip(&offsets_total)
        .map(|(&a, &o)| LayerProfile {
            active_sites: a as f64 / n,
            mean_offsets: if a == 0 { 1.0 } else { o as f64 / a as f64 },
        })
        .collect();
    Ok(SparsityProfile { entries })
}
