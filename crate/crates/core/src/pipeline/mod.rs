//! Two-stream execution simulation over a routing trace.
//!
//! A single serial transfer channel moves experts from host memory into the
//! slab cache while the compute stream runs each layer's demanded experts in
//! ascending id order. The first `L_pinned` layers keep their whole expert
//! pool resident. See [`simulate`] for the event rules.

mod engine;
mod report;

use serde::{Deserialize, Serialize};

use crate::cache::{EvictionOrder, DEFAULT_SPECULATIVE_GRACE};
use crate::compress::CompressionPlan;
use crate::error::{Error, Result};
use crate::predict::{ExpertPredictor, PredictorSpec};
use crate::trace::{ExpertRef, RoutingTrace};

pub use report::{LayerTiming, SimReport, REPORT_COLUMNS, TIMELINE_COLUMNS};

/// Memory split of the GPU, in MB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryBudget {
    /// Memory left for experts after static weights and activations.
    pub m_avail: f64,
    /// Reserved for the dynamic slab cache.
    pub c_safe: f64,
    /// Non-expert weights; informational.
    pub static_resident: f64,
}

impl Default for MemoryBudget {
    fn default() -> Self {
        Self {
            m_avail: 35_900.0,
            c_safe: 14_300.0,
            static_resident: 4_100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Predictor-driven prefetch plus on-demand loads.
    #[default]
    Prefetch,
    /// No prediction; every miss is loaded when compute reaches it.
    Reactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub mode: SimMode,
    /// MB per ms over the single transfer channel; `inf` makes transfers free.
    pub bandwidth: f64,
    /// MB per expert.
    pub expert_size: f64,
    /// ms per expert execution on the GPU, whatever the token count.
    pub gpu_compute_per_expert: f64,
    /// ms per expert execution on the CPU; `inf` disables the hybrid path.
    pub cpu_compute_per_expert: f64,
    /// Projected residency wait in ms above which an expert goes to the CPU.
    pub hybrid_threshold: f64,
    pub memory: MemoryBudget,
    pub l_semantic: usize,
    pub l_pinned: Option<usize>,
    pub predictor: PredictorSpec,
    /// Slab count; derived from `memory.c_safe / expert_size` when unset.
    pub num_slabs: Option<usize>,
    /// Decode steps to simulate; all of the trace's when unset.
    pub decode_steps: Option<usize>,
    pub seed: u64,
    /// One-time host-side compression cost, in ms.
    pub compression_latency: f64,
    /// One-time host-side predictor setup cost, in ms.
    pub predictor_latency: f64,
    pub speculative_grace: u64,
    pub eviction: EvictionOrder,
    /// Per-step priority decay of cached experts outside the lookahead window.
    pub priority_decay: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: SimMode::Prefetch,
            bandwidth: 25.0,
            expert_size: 17.3,
            gpu_compute_per_expert: 0.15,
            cpu_compute_per_expert: f64::INFINITY,
            hybrid_threshold: f64::INFINITY,
            memory: MemoryBudget::default(),
            l_semantic: 8,
            l_pinned: None,
            predictor: PredictorSpec::default(),
            num_slabs: None,
            decode_steps: None,
            seed: 0,
            compression_latency: 14.70,
            predictor_latency: 2.72,
            speculative_grace: DEFAULT_SPECULATIVE_GRACE,
            eviction: EvictionOrder::Priority,
            priority_decay: crate::predict::DEFAULT_GAMMA,
        }
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_nan() || v < 0.0 {
        return Err(Error::invalid(field, format!("{v} must be >= 0")));
    }
    Ok(())
}

impl SimConfig {
    // Negated comparisons reject NaN as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::invalid("bandwidth", format!("{} must be > 0", self.bandwidth)));
        }
        if !(self.expert_size > 0.0 && self.expert_size.is_finite()) {
            return Err(Error::invalid(
                "expert_size",
                format!("{} must be finite and > 0", self.expert_size),
            ));
        }
        if !self.gpu_compute_per_expert.is_finite() {
            return Err(Error::invalid("gpu_compute_per_expert", "must be finite"));
        }
        non_negative("gpu_compute_per_expert", self.gpu_compute_per_expert)?;
        if !(self.cpu_compute_per_expert > 0.0) {
            return Err(Error::invalid(
                "cpu_compute_per_expert",
                "must be > 0 (inf disables the CPU path)",
            ));
        }
        non_negative("hybrid_threshold", self.hybrid_threshold)?;
        for (field, v) in [
            ("memory.m_avail", self.memory.m_avail),
            ("memory.c_safe", self.memory.c_safe),
            ("memory.static_resident", self.memory.static_resident),
            ("compression_latency", self.compression_latency),
            ("predictor_latency", self.predictor_latency),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(field, "must be finite"));
            }
            non_negative(field, v)?;
        }
        if !(0.0..=1.0).contains(&self.priority_decay) {
            return Err(Error::invalid(
                "priority_decay",
                format!("{} must be in [0, 1]", self.priority_decay),
            ));
        }
        if self.num_slabs == Some(0) {
            return Err(Error::invalid("num_slabs", "must be >= 1"));
        }
        if self.num_slabs.is_none() && self.memory.c_safe < self.expert_size {
            return Err(Error::invalid(
                "memory.c_safe",
                format!(
                    "{} MB cannot hold one {} MB expert",
                    self.memory.c_safe, self.expert_size
                ),
            ));
        }
        Ok(())
    }

    /// Transfer time of one expert in ms.
    pub fn transfer_time(&self) -> f64 {
        if self.bandwidth.is_infinite() {
            0.0
        } else {
            self.expert_size / self.bandwidth
        }
    }

    /// True when experts may fall back to CPU execution.
    pub fn hybrid(&self) -> bool {
        self.cpu_compute_per_expert.is_finite() && self.hybrid_threshold.is_finite()
    }

    pub fn slab_count(&self) -> usize {
        self.num_slabs
            .unwrap_or_else(|| (self.memory.c_safe / self.expert_size).floor() as usize)
    }
}

/// Valid pinned-prefix depths and the chosen one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixPlan {
    pub lower: usize,
    pub upper: usize,
    pub chosen: usize,
}

/// Pinned-prefix planning: depths in `[l_semantic, floor((m_avail - c_safe) / s_layer)]`
/// are valid; the compact end is chosen unless `requested` names another
/// valid depth.
pub fn plan_prefix(
    m_avail: f64,
    s_layer: f64,
    c_safe: f64,
    l_semantic: usize,
    requested: Option<usize>,
) -> Result<PrefixPlan> {
    for (name, v) in [("m_avail", m_avail), ("s_layer", s_layer), ("c_safe", c_safe)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Planning(format!("{name} = {v} must be finite and >= 0")));
        }
    }
    if s_layer <= 0.0 {
        return Err(Error::Planning("layer size must be > 0".into()));
    }
    if c_safe > m_avail {
        return Err(Error::Planning(format!(
            "cache reservation {c_safe} MB exceeds available memory {m_avail} MB"
        )));
    }
    let upper = ((m_avail - c_safe) / s_layer).floor() as usize;
    if upper < l_semantic {
        return Err(Error::Planning(format!(
            "insufficient memory for semantic prefix: at most {upper} layers fit, {l_semantic} needed"
        )));
    }
    let chosen = match requested {
        None => l_semantic,
        Some(l) if (l_semantic..=upper).contains(&l) => l,
        Some(l) => {
            return Err(Error::Planning(format!(
                "requested prefix depth {l} outside the valid interval [{l_semantic}, {upper}]"
            )))
        }
    };
    Ok(PrefixPlan {
        lower: l_semantic,
        upper,
        chosen,
    })
}

/// Static decisions for one simulated request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub prefix: PrefixPlan,
    pub l_pinned: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub num_slabs: usize,
}

impl ExecutionPlan {
    /// Plans the pinned prefix from the memory budget and checks it against
    /// the trace geometry.
    pub fn new(trace: &RoutingTrace, cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let s_layer = trace.num_experts as f64 * cfg.expert_size;
        let prefix = plan_prefix(
            cfg.memory.m_avail,
            s_layer,
            cfg.memory.c_safe,
            cfg.l_semantic,
            cfg.l_pinned,
        )?;
        if prefix.chosen > trace.num_layers {
            return Err(Error::Planning(format!(
                "prefix depth {} exceeds the model's {} layers",
                prefix.chosen, trace.num_layers
            )));
        }
        Ok(Self {
            prefix,
            l_pinned: prefix.chosen,
            num_layers: trace.num_layers,
            num_experts: trace.num_experts,
            num_slabs: cfg.slab_count(),
        })
    }

    /// Every expert kept resident by the prefix.
    pub fn pinned_keys(&self) -> impl Iterator<Item = ExpertRef> + '_ {
        (0..self.l_pinned).flat_map(move |l| (0..self.num_experts).map(move |e| ExpertRef::new(l, e)))
    }

    /// Layers used for affinity scoring during compression.
    pub fn prefix_layers(&self) -> Vec<usize> {
        (0..self.l_pinned).collect()
    }
}

/// Runs the predictive two-stream pipeline.
///
/// Per layer, at its start time `t`:
/// 1. the channel has started every queued transfer whose start is before
///    `t`, and loads finishing at or before `t` are resident;
/// 2. prefetches not yet started are dropped; demanded experts that are
///    neither resident nor in flight are queued for on-demand transfer in
///    ascending id order ahead of any new prefetch;
/// 3. the predictor ranks experts for the next dynamic layer and its top `B`
///    that are not cached join the prefetch queue; inside the pinned prefix
///    the target is layer `L_pinned`, once it is within the lookahead window;
/// 4. demanded experts compute in ascending id order, each starting at the
///    later of the previous finish and its residency time.
///
/// At layer end, residency classes are refreshed from the latest prediction
/// and the executed experts expire. Pinned layers compute the uncompressed
/// prompt's demand with no transfers. Compression and predictor setup run on
/// the host alongside the prefix: the channel stays idle until they finish
/// and the first dynamic layer of prefill starts no earlier.
pub fn simulate(
    trace: &RoutingTrace,
    exec: &ExecutionPlan,
    plan: &CompressionPlan,
    predictor: &dyn ExpertPredictor,
    cfg: &SimConfig,
) -> Result<SimReport> {
    let cfg = SimConfig {
        mode: SimMode::Prefetch,
        ..cfg.clone()
    };
    engine::run(trace, exec, plan, Some(predictor), &cfg)
}

/// Runs without prediction: each miss is transferred when compute reaches it.
pub fn simulate_reactive(
    trace: &RoutingTrace,
    exec: &ExecutionPlan,
    plan: &CompressionPlan,
    cfg: &SimConfig,
) -> Result<SimReport> {
    let cfg = SimConfig {
        mode: SimMode::Reactive,
        ..cfg.clone()
    };
    engine::run(trace, exec, plan, None, &cfg)
}

/// Like [`simulate`] (or [`simulate_reactive`] when `predictor` is `None`),
/// with experts whose projected residency wait at layer start exceeds
/// `threshold` ms executed on the CPU instead.
pub fn simulate_hybrid(
    trace: &RoutingTrace,
    exec: &ExecutionPlan,
    plan: &CompressionPlan,
    predictor: Option<&dyn ExpertPredictor>,
    cfg: &SimConfig,
    threshold: f64,
) -> Result<SimReport> {
    if !cfg.cpu_compute_per_expert.is_finite() {
        return Err(Error::invalid(
            "cpu_compute_per_expert",
            "the hybrid mode needs a finite CPU cost",
        ));
    }
    let cfg = SimConfig {
        mode: if predictor.is_some() {
            SimMode::Prefetch
        } else {
            SimMode::Reactive
        },
        hybrid_threshold: threshold,
        ..cfg.clone()
    };
    engine::run(trace, exec, plan, predictor, &cfg)
}

/// One row of the mechanism ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: SimReport,
}

pub const ABLATION_ROWS: [&str; 4] = ["base", "+compression", "+prediction", "full"];

/// Four runs under one config: reactive on the full prompt, reactive on the
/// compressed prompt, prefetch without grace and with FIFO eviction, and the
/// full system.
pub fn run_ablation(
    trace: &RoutingTrace,
    exec: &ExecutionPlan,
    compressed: &CompressionPlan,
    predictor: &dyn ExpertPredictor,
    cfg: &SimConfig,
) -> Result<Vec<AblationRow>> {
    let full_prompt = CompressionPlan::keep_all(trace);
    let base = simulate_reactive(trace, exec, &full_prompt, cfg)?;
    let with_compression = simulate_reactive(trace, exec, compressed, cfg)?;
    let naive = SimConfig {
        speculative_grace: 0,
        eviction: EvictionOrder::Fifo,
        ..cfg.clone()
    };
    let with_prediction = simulate(trace, exec, compressed, predictor, &naive)?;
    let full = SimConfig {
        eviction: EvictionOrder::Priority,
        ..cfg.clone()
    };
    let full = simulate(trace, exec, compressed, predictor, &full)?;
    Ok(ABLATION_ROWS
        .iter()
        .zip([base, with_compression, with_prediction, full])
        .map(|(name, report)| AblationRow {
            name: name.to_string(),
            report,
        })
        .collect())
}
