//! Analytic per-device memory estimator over training strategies.
//!
//! Purely arithmetic: no measured fudge factors. The four categories
//! follow the usual training-footprint taxonomy (weights, gradients,
//! optimizer states, activations); strategies differ only in the gradient
//! and activation rules, and the data-parallel partitioning flags model
//! the optimizer-state/gradient sharding arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMem {
    pub param_count: u64,
    pub activation_bytes_per_sample: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMemSpec {
    pub name: String,
    pub layers: Vec<LayerMem>,
    /// Bytes per parameter element (4 for fp32).
    pub element_size: u64,
    /// Optimizer bytes per parameter byte (2.0 for Adam's m + v at
    /// parameter precision).
    pub optimizer_state_multiplier: f64,
    /// Optional per-device additive overhead; defaults to 0 because no
    /// workspace/fragmentation model is assumed.
    #[serde(default)]
    pub overhead_bytes: u64,
}

impl ModelMemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("memory spec has no layers".into()));
        }
        if self.layers.iter().any(|l| l.param_count == 0) {
            return Err(Error::Config("layer with zero parameters".into()));
        }
        if self.element_size == 0 {
            return Err(Error::Config("element size must be positive".into()));
        }
        Ok(())
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count).sum()
    }

    pub fn max_layer_params(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count).max().unwrap_or(0)
    }

    pub fn activation_bytes_per_sample(&self) -> u64 {
        self.layers.iter().map(|l| l.activation_bytes_per_sample).sum()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ModelMemSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// No micro-batching: the whole mini-batch shard is live at once.
    Plain,
    /// Gradient accumulation: micro-batches, full-model gradient buffer.
    GradAccum,
    /// Optimizer accumulation: micro-batches, per-layer gradient release.
    AdamA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub n_micro: u64,
    pub workers: u64,
    /// Partition optimizer states across workers.
    #[serde(default)]
    pub os_partition: bool,
    /// Partition gradients across workers.
    #[serde(default)]
    pub grad_partition: bool,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_micro == 0 || self.workers == 0 {
            return Err(Error::Config("N and W must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub weights: u64,
    pub gradients: u64,
    pub optimizer_states: u64,
    pub activations: u64,
    pub overhead: u64,
    pub total: u64,
}

impl MemoryBreakdown {
    fn finish(mut self) -> Self {
        self.total =
            self.weights + self.gradients + self.optimizer_states + self.activations + self.overhead;
        self
    }
}

/// Per-device footprint estimate.
pub fn estimate(
    spec: &ModelMemSpec,
    cfg: &StrategyConfig,
    minibatch: u64,
) -> Result<MemoryBreakdown> {
    spec.validate()?;
    cfg.validate()?;
    let micro_divisor = match cfg.strategy {
        Strategy::Plain => cfg.workers,
        Strategy::GradAccum | Strategy::AdamA => cfg.n_micro * cfg.workers,
    };
    if minibatch == 0 || minibatch % micro_divisor != 0 {
        return Err(Error::Divisibility {
            minibatch: minibatch as usize,
            divisor: micro_divisor as usize,
        });
    }
    let e = spec.element_size;
    let weights = spec.total_params() * e;
    let mut gradients = match cfg.strategy {
        Strategy::Plain | Strategy::GradAccum => spec.total_params() * e,
        Strategy::AdamA => spec.max_layer_params() * e,
    };
    if cfg.grad_partition {
        gradients /= cfg.workers;
    }
    let mut optimizer_states =
        (spec.optimizer_state_multiplier * (spec.total_params() * e) as f64).round() as u64;
    if cfg.os_partition {
        optimizer_states /= cfg.workers;
    }
    let activations = (minibatch / micro_divisor) * spec.activation_bytes_per_sample();
    Ok(MemoryBreakdown {
        weights,
        gradients,
        optimizer_states,
        activations,
        overhead: spec.overhead_bytes,
        total: 0,
    }
    .finish())
}

/// A monotone family of model specs indexed by an integer size parameter.
pub trait ScalingFamily {
    fn spec_for(&self, size: u64) -> ModelMemSpec;
    fn min_size(&self) -> u64 {
        1
    }
    fn max_size(&self) -> u64 {
        1 << 20
    }
}

/// Transformer-style family: `size` identical layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformLayerFamily {
    pub layer_param_count: u64,
    pub activation_bytes_per_sample: u64,
    pub element_size: u64,
    pub optimizer_state_multiplier: f64,
}

impl ScalingFamily for UniformLayerFamily {
    fn spec_for(&self, size: u64) -> ModelMemSpec {
        ModelMemSpec {
            name: format!("uniform-{size}"),
            layers: vec![
                LayerMem {
                    param_count: self.layer_param_count,
                    activation_bytes_per_sample: self.activation_bytes_per_sample,
                };
                size as usize
            ],
            element_size: self.element_size,
            optimizer_state_multiplier: self.optimizer_state_multiplier,
            overhead_bytes: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitResult {
    pub size_param: u64,
    pub total_params: u64,
    pub per_device_bytes: u64,
}

/// Binary search for the largest family member whose per-device estimate
/// fits the capacity.
pub fn largest_fit(
    family: &dyn ScalingFamily,
    cfg: &StrategyConfig,
    capacity_bytes: u64,
    minibatch: u64,
) -> Result<FitResult> {
    let fits = |size: u64| -> Result<Option<MemoryBreakdown>> {
        let spec = family.spec_for(size);
        let b = estimate(&spec, cfg, minibatch)?;
        Ok((b.total <= capacity_bytes).then_some(b))
    };
    let (mut lo, mut hi) = (family.min_size(), family.max_size());
    if fits(lo)?.is_none() {
        return Err(Error::NoneFits);
    }
    // Invariant: lo fits, hi+1 treated as unknown; shrink until lo == hi.
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid)?.is_some() {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let spec = family.spec_for(lo);
    let b = estimate(&spec, cfg, minibatch)?;
    Ok(FitResult {
        size_param: lo,
        total_params: spec.total_params(),
        per_device_bytes: b.total,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyRow {
    pub config: StrategyConfig,
    pub breakdown: MemoryBreakdown,
    /// Savings vs the first config (positive = less memory).
    pub savings_vs_first: i64,
}

/// Breakdown per config plus savings against the first config.
pub fn compare_strategies(
    spec: &ModelMemSpec,
    configs: &[StrategyConfig],
    minibatch: u64,
) -> Result<Vec<StrategyRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    let mut first_total = None;
    for cfg in configs {
        let b = estimate(spec, cfg, minibatch)?;
        let base = *first_total.get_or_insert(b.total);
        rows.push(StrategyRow {
            config: *cfg,
            breakdown: b,
            savings_vs_first: base as i64 - b.total as i64,
        });
    }
    Ok(rows)
}

pub const PRESET_BERT_BASE: &str = include_str!("../presets/bert-base.json");
pub const PRESET_BERT_LARGE: &str = include_str!("../presets/bert-large.json");
pub const PRESET_BERT_4B: &str = include_str!("../presets/bert-4b.json");

pub fn preset(name: &str) -> Result<ModelMemSpec> {
    let json = match name {
        "bert-base" => PRESET_BERT_BASE,
        "bert-large" => PRESET_BERT_LARGE,
        "bert-4b" => PRESET_BERT_4B,
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (available: bert-base, bert-large, bert-4b)"
            )))
        }
    };
    ModelMemSpec::from_json(json)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> ModelMemSpec {
        ModelMemSpec {
            name: "toy".into(),
            layers: vec![
                LayerMem {
                    param_count: 1000,
                    activation_bytes_per_sample: 64,
                },
                LayerMem {
                    param_count: 500,
                    activation_bytes_per_sample: 32,
                },
                LayerMem {
                    param_count: 250,
                    activation_bytes_per_sample: 16,
                },
            ],
            element_size: 4,
            optimizer_state_multiplier: 2.0,
            overhead_bytes: 0,
        }
    }

    fn cfg(strategy: Strategy, n: u64, w: u64) -> StrategyConfig {
        StrategyConfig {
            strategy,
            n_micro: n,
            workers: w,
            os_partition: false,
            grad_partition: false,
        }
    }

    #[test]
    fn plain_equals_gradaccum_at_n1() {
        let s = toy_spec();
        let a = estimate(&s, &cfg(Strategy::Plain, 1, 1), 16).unwrap();
        let b = estimate(&s, &cfg(Strategy::GradAccum, 1, 1), 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn doubling_n_halves_activations_only() {
        let s = toy_spec();
        let a = estimate(&s, &cfg(Strategy::GradAccum, 2, 1), 16).unwrap();
        let b = estimate(&s, &cfg(Strategy::GradAccum, 4, 1), 16).unwrap();
        assert_eq!(a.activations, 2 * b.activations);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.gradients, b.gradients);
        assert_eq!(a.optimizer_states, b.optimizer_states);
    }

    #[test]
    fn adama_gradients_are_max_layer() {
        let s = toy_spec();
        let a = estimate(&s, &cfg(Strategy::AdamA, 2, 1), 16).unwrap();
        assert_eq!(a.gradients, 1000 * 4);
        let g = estimate(&s, &cfg(Strategy::GradAccum, 2, 1), 16).unwrap();
        assert_eq!(g.gradients, 1750 * 4);
    }

    #[test]
    fn os_partition_divides_exactly() {
        let s = toy_spec();
        let mut c = cfg(Strategy::GradAccum, 1, 8);
        c.os_partition = true;
        let b = estimate(&s, &c, 64).unwrap();
        assert_eq!(b.optimizer_states, 2 * 1750 * 4 / 8);
    }

    #[test]
    fn divisibility_enforced() {
        let s = toy_spec();
        assert!(estimate(&s, &cfg(Strategy::GradAccum, 3, 1), 16).is_err());
    }

    #[test]
    fn largest_fit_monotone_in_capacity() {
        let fam = UniformLayerFamily {
            layer_param_count: 1000,
            activation_bytes_per_sample: 64,
            element_size: 4,
            optimizer_state_multiplier: 2.0,
        };
        let c = cfg(Strategy::GradAccum, 1, 1);
        let small = largest_fit(&fam, &c, 100_000, 8).unwrap();
        let big = largest_fit(&fam, &c, 1_000_000, 8).unwrap();
        assert!(big.total_params >= small.total_params);
    }

    #[test]
    fn largest_fit_none_fits() {
        let fam = UniformLayerFamily {
            layer_param_count: 1000,
            activation_bytes_per_sample: 64,
            element_size: 4,
            optimizer_state_multiplier: 2.0,
        };
        let c = cfg(Strategy::GradAccum, 1, 1);
        assert!(matches!(
            largest_fit(&fam, &c, 100, 8),
            Err(Error::NoneFits)
        ));
    }

    #[test]
    fn compare_first_row_zero_savings() {
        let s = toy_spec();
        let rows = compare_strategies(
            &s,
            &[cfg(Strategy::GradAccum, 2, 1), cfg(Strategy::AdamA, 2, 1)],
            16,
        )
        .unwrap();
        assert_eq!(rows[0].savings_vs_first, 0);
        // AdamA saves exactly (total - max layer) gradient bytes here.
        assert_eq!(rows[1].savings_vs_first, (1750 - 1000) * 4);
    }

    #[test]
    fn presets_parse() {
        for name in ["bert-base", "bert-large", "bert-4b"] {
            let p = preset(name).unwrap();
            assert!(p.total_params() > 0, "{name}");
        }
    }
}
