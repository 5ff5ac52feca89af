//! Subnet sampling from the inverted-bottleneck search space, feasibility
//! filtering through the latency simulator and the weight budget, and the
//! latency-accuracy Pareto frontier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockSpec, ModelSpec};
use crate::sim::{model_latency, HwConfig, SparsityModel, SparsityProfile};

/// The four searched axes (block count, per-block channels, per-block
/// expansion ratios, GRU hidden size) plus the fixed skeleton around them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub input_height: u16,
    pub input_width: u16,
    pub in_channels: u32,
    pub stem_channels: u32,
    pub stem_stride: u32,
    pub head_channels: u32,
    pub block_count_min: usize,
    pub block_count_max: usize,
    /// Choice list per block position; length >= block_count_max.
    pub channel_choices: Vec<Vec<u32>>,
    pub expansion_choices: Vec<Vec<u32>>,
    pub gru_hidden_choices: Vec<u32>,
    /// Stride per block position.
    pub stride_schedule: Vec<u32>,
    /// Channels must be positive multiples of this.
    pub channel_granularity: u32,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.block_count_min == 0 || self.block_count_min > self.block_count_max {
            return Err(Error::config("block count range is empty"));
        }
        let need = self.block_count_max;
        if self.channel_choices.len() < need
            || self.expansion_choices.len() < need
            || self.stride_schedule.len() < need
        {
            return Err(Error::config(format!(
                "per-block choice lists must cover {need} positions"
            )));
        }
        if self.gru_hidden_choices.is_empty() {
            return Err(Error::config("gru hidden choices must be nonempty"));
        }
        if self.channel_granularity == 0 {
            return Err(Error::config("channel granularity must be positive"));
        }
        for (i, choices) in self.channel_choices.iter().enumerate() {
            if choices.is_empty() {
                return Err(Error::config(format!("block {i} channel choices empty")));
            }
            for &c in choices {
                if c == 0 || c % self.channel_granularity != 0 {
                    return Err(Error::config(format!(
                        "block {i} channel {c} is not a positive multiple of {}",
                        self.channel_granularity
                    )));
                }
            }
        }
        for (i, choices) in self.expansion_choices.iter().enumerate() {
            if choices.is_empty() || choices.contains(&0) {
                return Err(Error::config(format!("block {i} expansion choices invalid")));
            }
        }
        if self.stride_schedule.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(Error::config("stride schedule entries must be 1 or 2"));
        }
        Ok(())
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        let positions = 6;
        SearchSpace {
            input_height: 64,
            input_width: 64,
            in_channels: 3,
            stem_channels: 16,
            stem_stride: 2,
            head_channels: 64,
            block_count_min: 3,
            block_count_max: positions,
            channel_choices: vec![vec![16, 24, 32, 48, 64]; positions],
            expansion_choices: vec![vec![1, 2, 4, 6]; positions],
            gru_hidden_choices: vec![32, 64, 128],
            stride_schedule: vec![1, 2, 1, 2, 1, 1],
            channel_granularity: 8,
        }
    }
}

fn sample_with_rng(space: &SearchSpace, rng: &mut ChaCha8Rng) -> ModelSpec {
    let pick = |rng: &mut ChaCha8Rng, choices: &[u32]| choices[rng.random_range(0..choices.len())];
    let count = rng.random_range(space.block_count_min..=space.block_count_max);
    let mut blocks = Vec::with_capacity(count);
    let mut prev = space.stem_channels;
    for i in 0..count {
        let out_channels = pick(rng, &space.channel_choices[i]);
        let expansion_ratio = pick(rng, &space.expansion_choices[i]);
        blocks.push(BlockSpec {
            expansion_ratio,
            in_channels: prev, // chaining repaired here
            out_channels,
            stride: space.stride_schedule[i],
        });
        prev = out_channels;
    }
    ModelSpec {
        input_height: space.input_height,
        input_width: space.input_width,
        in_channels: space.in_channels,
        stem_channels: space.stem_channels,
        stem_stride: space.stem_stride,
        blocks,
        head_channels: space.head_channels,
        gru_hidden: pick(rng, &space.gru_hidden_choices),
    }
}

/// Draw one subnet uniformly per axis; deterministic for a given seed.
pub fn sample_subnet(space: &SearchSpace, seed: u64) -> Result<ModelSpec> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = sample_with_rng(space, &mut rng);
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

/// A sampled architecture with its simulated cost and (optionally) accuracy
/// joined from an external evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub spec: ModelSpec,
    pub latency_s: f64,
    pub weight_bytes: u64,
    pub accuracy: Option<f64>,
}

/// Constraint check: weight footprint within the on-chip budget AND total
/// simulated latency within the cap (both inclusive).
pub fn feasible(
    spec: &ModelSpec,
    hw: &HwConfig,
    latency_cap_s: f64,
    profile: &SparsityProfile,
) -> Result<(bool, Candidate)> {
    let report = model_latency(spec, profile, hw)?;
    let ok = report.weight_bytes <= hw.weight_budget_bytes
        && report.total_latency_s <= latency_cap_s;
    Ok((
        ok,
        Candidate {
            spec: spec.clone(),
            latency_s: report.total_latency_s,
            weight_bytes: report.weight_bytes,
            accuracy: None,
        },
    ))
}

/// Sample `n_samples` subnets (per-index seeded: the result is identical for
/// any worker count), dedup by spec hash, and keep the candidates passing
/// the feasibility filter. `threads` = 0 uses the default worker count.
pub fn search_run(
    space: &SearchSpace,
    hw: &HwConfig,
    latency_cap_s: f64,
    sparsity: &SparsityModel,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<Candidate>> {
    space.validate()?;
    hw.validate()?;
    sparsity.validate()?;

    let mut specs = Vec::with_capacity(n_samples);
    let mut seen = std::collections::HashSet::new();
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let spec = sample_with_rng(space, &mut rng);
        if seen.insert(spec.spec_hash()) {
            specs.push(spec);
        }
    }

    let eval = |spec: &ModelSpec| -> Result<(bool, Candidate)> {
        let profile = sparsity.profile_for(spec)?;
        feasible(spec, hw, latency_cap_s, &profile)
    };
    let results: Vec<(bool, Candidate)> = if threads == 1 {
        specs.iter().map(eval).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| specs.par_iter().map(eval).collect::<Result<_>>())?
    };
    Ok(results
        .into_iter()
        .filter_map(|(ok, c)| ok.then_some(c))
        .collect())
}

/// Non-dominated set under (latency minimized, accuracy maximized), sorted
/// by latency ascending; exact ties are all retained.
pub fn pareto_front(candidates: &[Candidate]) -> Result<Vec<Candidate>> {
    for c in candidates {
        let Some(acc) = c.accuracy else {
            return Err(Error::argument(format!(
                "candidate {} has no accuracy",
                c.spec.spec_hash_hex()
            )));
        };
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::argument(format!(
                "candidate {} accuracy {acc} outside [0,1]",
                c.spec.spec_hash_hex()
            )));
        }
        if !c.latency_s.is_finite() || c.latency_s <= 0.0 {
            return Err(Error::argument(format!(
                "candidate {} latency {} invalid",
                c.spec.spec_hash_hex(),
                c.latency_s
            )));
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[a]
            .latency_s
            .partial_cmp(&candidates[b].latency_s)
            .unwrap()
    });
    let mut front = Vec::new();
    let mut best_prev = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        // Latency group [i, j)
        let lat = candidates[order[i]].latency_s;
        let mut j = i;
        while j < order.len() && candidates[order[j]].latency_s == lat {
            j += 1;
        }
        let group_max = order[i..j]
            .iter()
            .map(|&k| candidates[k].accuracy.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        if group_max > best_prev {
            for &k in &order[i..j] {
                if candidates[k].accuracy.unwrap() == group_max {
                    front.push(candidates[k].clone());
                }
            }
            best_prev = group_max;
        }
        i = j;
    }
    Ok(front)
}

/// Deterministic stand-in for trained accuracy: a monotone, lightly noisy
/// function of parameter count, so the search pipeline runs end-to-end
/// without training infrastructure.
pub fn synthetic_accuracy(spec: &ModelSpec, seed: u64) -> f64 {
    let params = crate::sim::weight_footprint(spec) as f64;
    let base = 0.55 + 0.44 * (1.0 - (-params / 400_000.0).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec.spec_hash());
    let noise: f64 = rng.random_range(-0.015..0.015);
    (base + noise).clamp(0.0, 1.0)
}
