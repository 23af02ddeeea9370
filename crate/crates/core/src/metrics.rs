//! Routing diagnostics over arbitrary token subsets: working-set size,
//! inactive experts, top-K activation coverage and inter-layer similarity.
//! Comparing a compressed subset against the raw token set shows how much
//! pruning concentrates and stabilizes expert demand.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::RoutingTrace;

/// Activation count per expert over `subset` at `layer`.
pub fn activation_histogram(trace: &RoutingTrace, subset: &[usize], layer: usize) -> Vec<u64> {
    let mut h = vec![0u64; trace.num_experts];
    for &t in subset {
        for &e in trace.experts(layer, t) {
            h[e] += 1;
        }
    }
    h
}

pub fn working_set(trace: &RoutingTrace, subset: &[usize], layer: usize) -> usize {
    trace.union_experts(layer, subset).len()
}

/// Share of all activations captured by the K most-activated experts.
pub fn topk_coverage(trace: &RoutingTrace, subset: &[usize], layer: usize, k: usize) -> f64 {
    let mut h = activation_histogram(trace, subset, layer);
    let total: u64 = h.iter().sum();
    if total == 0 {
        return 0.0;
    }
    h.sort_unstable_by(|a, b| b.cmp(a));
    let top: u64 = h.iter().take(k).sum();
    top as f64 / total as f64
}

fn cosine(a: &[u64], b: &[u64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(0.0, 1.0),
    }
}

/// Cosine similarity of the activation histograms at `layer` and `layer + 1`.
pub fn interlayer_similarity(trace: &RoutingTrace, subset: &[usize], layer: usize) -> f64 {
    cosine(
        &activation_histogram(trace, subset, layer),
        &activation_histogram(trace, subset, layer + 1),
    )
}

/// Jaccard similarity of the expert sets at `layer` and `layer + 1`.
pub fn interlayer_jaccard(trace: &RoutingTrace, subset: &[usize], layer: usize) -> f64 {
    let a = trace.union_experts(layer, subset);
    let b = trace.union_experts(layer + 1, subset);
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAffinity {
    pub layer: usize,
    pub working_set: usize,
    pub inactive_experts: usize,
    pub topk_coverage: f64,
    /// Similarity to the next layer; absent for the last layer.
    pub interlayer_similarity: Option<f64>,
    pub interlayer_jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityReport {
    pub coverage_k: usize,
    pub subset_size: usize,
    pub layers: Vec<LayerAffinity>,
    pub mean_working_set: f64,
    pub mean_inactive_experts: f64,
    pub mean_topk_coverage: f64,
    pub mean_interlayer_similarity: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn affinity_report(trace: &RoutingTrace, subset: &[usize], k: usize) -> Result<AffinityReport> {
    if subset.is_empty() {
        return Err(Error::invalid("subset", "affinity report of an empty token subset"));
    }
    if let Some(&bad) = subset.iter().find(|&&t| t >= trace.num_tokens()) {
        return Err(Error::invalid("subset", format!("token index {bad} out of range")));
    }
    if k > trace.num_experts {
        return Err(Error::invalid(
            "k",
            format!("coverage K={k} exceeds E={}", trace.num_experts),
        ));
    }
    let layers: Vec<LayerAffinity> = (0..trace.num_layers)
        .map(|l| {
            let ws = working_set(trace, subset, l);
            let next = l + 1 < trace.num_layers;
            LayerAffinity {
                layer: l,
                working_set: ws,
                inactive_experts: trace.num_experts - ws,
                topk_coverage: topk_coverage(trace, subset, l, k),
                interlayer_similarity: next.then(|| interlayer_similarity(trace, subset, l)),
                interlayer_jaccard: next.then(|| interlayer_jaccard(trace, subset, l)),
            }
        })
        .collect();
    Ok(AffinityReport {
        coverage_k: k,
        subset_size: subset.len(),
        mean_working_set: mean(layers.iter().map(|l| l.working_set as f64)),
        mean_inactive_experts: mean(layers.iter().map(|l| l.inactive_experts as f64)),
        mean_topk_coverage: mean(layers.iter().map(|l| l.topk_coverage)),
        mean_interlayer_similarity: mean(layers.iter().filter_map(|l| l.interlayer_similarity)),
        layers,
    })
}

impl AffinityReport {
    /// One CSV row per layer.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer",
            "working_set",
            "inactive_experts",
            "topk_coverage",
            "interlayer_similarity",
            "interlayer_jaccard",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for l in &self.layers {
            w.write_record([
                l.layer.to_string(),
                l.working_set.to_string(),
                l.inactive_experts.to_string(),
                l.topk_coverage.to_string(),
                opt(l.interlayer_similarity),
                opt(l.interlayer_jaccard),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
