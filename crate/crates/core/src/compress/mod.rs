//! Affinity-aware visual token compression.
//!
//! The most salient visual tokens form a core that is always kept. The
//! experts the core activates across the pinned prefix layers form the target
//! set; every other visual token is scored by its normalized saliency minus
//! `lambda` times the fraction of its own prefix experts that fall outside the
//! target. The remaining keep budget goes to the best-scoring tokens.
//!
//! Text tokens are always retained and never count against any budget.

mod policy;

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::RoutingTrace;

pub use policy::{AffinityAware, KeepAll, RetentionPolicy, RetentionRegistry, SaliencyOnly, UniformRandom};

pub const DEFAULT_LAMBDA: f64 = 2.0;

/// Absorbs representation error in `ratio * n` before flooring, so that
/// e.g. 0.29 * 100 yields 29 rather than 28.
const BUDGET_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    /// Salient ratio: fraction of visual tokens in the core.
    pub alpha: f64,
    /// Keep ratio: fraction of visual tokens retained overall.
    pub beta: f64,
    pub lambda: f64,
    /// Layers whose routing defines each token's active expert set. Empty
    /// means "use the pinned prefix" and must be filled in before use.
    pub prefix_layers: Vec<usize>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.5,
            lambda: DEFAULT_LAMBDA,
            prefix_layers: Vec::new(),
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(
                "alpha",
                format!("must be in [0, 1], got {}", self.alpha),
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta", format!("must be in [0, 1], got {}", self.beta)));
        }
        if self.alpha > self.beta {
            return Err(Error::invalid(
                "alpha",
                format!("salient ratio {} exceeds keep ratio {}", self.alpha, self.beta),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(
                "lambda",
                format!("must be finite and >= 0, got {}", self.lambda),
            ));
        }
        if self.prefix_layers.is_empty() {
            return Err(Error::invalid("prefix_layers", "must name at least one layer"));
        }
        if let Some(&l) = self.prefix_layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::invalid(
                "prefix_layers",
                format!("layer {l} is outside the trace (L={num_layers})"),
            ));
        }
        Ok(())
    }
}

/// `floor(ratio * n)`, robust to representation error in `ratio`.
pub fn budget(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + BUDGET_EPS).floor() as usize
}

/// Score of one non-core visual token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: usize,
    pub delta: f64,
    pub score: f64,
}

/// Result of compression. All index arrays hold trace token indices in
/// ascending order, which makes the JSON form canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    /// Visual prompt tokens considered.
    pub visual: Vec<usize>,
    /// Normalized saliency, aligned with `visual`.
    pub saliency_norm: Vec<f64>,
    pub core: Vec<usize>,
    /// Retained visual tokens (a superset of `core`).
    pub keep: Vec<usize>,
    /// Text prompt tokens, always retained.
    pub text: Vec<usize>,
    pub target_experts: Vec<usize>,
    /// Expansion and score of every non-core visual token, by token index.
    pub scores: Vec<TokenScore>,
}

impl CompressionPlan {
    /// Every retained prompt token: kept visual tokens plus all text tokens.
    pub fn retained(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.keep.iter().chain(&self.text).copied().collect();
        out.sort_unstable();
        out
    }

    /// A plan that keeps every prompt token.
    pub fn keep_all(trace: &RoutingTrace) -> Self {
        let visual = trace.visual_indices();
        Self {
            saliency_norm: normalize_saliency(&saliencies(trace, &visual)).unwrap_or_default(),
            core: Vec::new(),
            keep: visual.clone(),
            visual,
            text: trace.text_prefill_indices(),
            target_experts: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn saliencies(trace: &RoutingTrace, visual: &[usize]) -> Vec<f64> {
    visual.iter().map(|&i| trace.tokens[i].saliency).collect()
}

/// Min-max normalization to [0, 1]; a constant vector maps to 0.5.
pub fn normalize_saliency(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some((i, s)) = raw.iter().enumerate().find(|(_, s)| !s.is_finite() || **s < 0.0) {
        return Err(Error::invalid(
            "saliency",
            format!("entry {i} is {s}; expected finite and >= 0"),
        ));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || hi == lo {
        return Ok(vec![0.5; raw.len()]);
    }
    Ok(raw.iter().map(|s| (s - lo) / (hi - lo)).collect())
}

/// Positions of the `floor(alpha * n_visual)` largest entries of `norm`,
/// ties broken by lower position. Returned in ascending order.
pub fn salient_core(norm: &[f64], alpha: f64, n_visual: usize) -> Vec<usize> {
    let k = budget(alpha, n_visual).min(norm.len());
    let mut order: Vec<usize> = (0..norm.len()).collect();
    order.sort_by(|&a, &b| norm[b].total_cmp(&norm[a]).then(a.cmp(&b)));
    let mut core = order[..k].to_vec();
    core.sort_unstable();
    core
}

/// Union of a token's routed experts over the prefix layers.
pub fn active_experts(trace: &RoutingTrace, token: usize, prefix_layers: &[usize]) -> Result<BTreeSet<usize>> {
    let mut set = BTreeSet::new();
    for &l in prefix_layers {
        let route = trace
            .routes
            .get(l)
            .and_then(|layer| layer.get(token))
            .ok_or_else(|| Error::Contract(format!("no route for token {token} at layer {l}")))?;
        set.extend(route.experts.iter().copied());
    }
    Ok(set)
}

/// Fraction of `experts` outside `target`.
pub fn marginal_expansion(experts: &BTreeSet<usize>, target: &BTreeSet<usize>) -> f64 {
    assert!(!experts.is_empty(), "marginal expansion of an empty expert set");
    experts.difference(target).count() as f64 / experts.len() as f64
}

/// Order for the extra budget: score, then saliency, then token index.
fn extra_order(a: &(TokenScore, f64), b: &(TokenScore, f64)) -> Ordering {
    b.0.score
        .total_cmp(&a.0.score)
        .then(b.1.total_cmp(&a.1))
        .then(a.0.token.cmp(&b.0.token))
}

pub fn compress(trace: &RoutingTrace, cfg: &CompressionConfig) -> Result<CompressionPlan> {
    cfg.validate(trace.num_layers)?;
    let visual = trace.visual_indices();
    let n = visual.len();
    let norm = normalize_saliency(&saliencies(trace, &visual))?;
    let k_keep = budget(cfg.beta, n);

    let core_pos = salient_core(&norm, cfg.alpha, n);
    let core: Vec<usize> = core_pos.iter().map(|&p| visual[p]).collect();
    let mut target = BTreeSet::new();
    for &t in &core {
        target.extend(active_experts(trace, t, &cfg.prefix_layers)?);
    }

    let mut in_core = vec![false; n];
    for &p in &core_pos {
        in_core[p] = true;
    }
    let mut candidates = Vec::with_capacity(n - core.len());
    for (p, &t) in visual.iter().enumerate() {
        if in_core[p] {
            continue;
        }
        let experts = active_experts(trace, t, &cfg.prefix_layers)?;
        let delta = marginal_expansion(&experts, &target);
        let score = norm[p] - cfg.lambda * delta;
        candidates.push((TokenScore { token: t, delta, score }, norm[p]));
    }
    let scores: Vec<TokenScore> = candidates.iter().map(|c| c.0).collect();

    candidates.sort_by(extra_order);
    let extra = k_keep.saturating_sub(core.len());
    let mut keep: Vec<usize> = core
        .iter()
        .copied()
        .chain(candidates.iter().take(extra).map(|c| c.0.token))
        .collect();
    keep.sort_unstable();

    Ok(CompressionPlan {
        visual,
        saliency_norm: norm,
        core,
        keep,
        text: trace.text_prefill_indices(),
        target_experts: target.into_iter().collect(),
        scores,
    })
}
