//! Lookahead expert-demand prediction.
//!
//! At every MoE layer a predictor scores all E expert ids for the next `W`
//! layers; the runtime prefetches the top `B`. Predictors are interchangeable
//! behind [`ExpertPredictor`] and built by name through
//! [`PredictorRegistry`].

mod dataset;
mod features;
mod mlp;
mod registry;
mod targets;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::compress::CompressionPlan;
use crate::error::{Error, Result};
use crate::trace::RoutingTrace;

pub use dataset::{build_dataset, read_dataset, write_dataset, Example};
pub use features::{build_features, FeatureVector};
pub use mlp::{train, MlpDims, MlpModel, TrainConfig, TrainReport, MODEL_VERSION};
pub use registry::{
    ExpertPredictor, HistoryPredictor, MlpPredictor, OraclePredictor, PredictorKind, PredictorRegistry, PredictorSpec,
    RandomPredictor,
};
pub use targets::build_targets;

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_GAMMA: f64 = 0.8;
pub const DEFAULT_TOP_B: usize = 20;

/// Which token set a prediction is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// The retained prompt tokens.
    Prefill,
    /// The single generated token of decode step `n`.
    Decode(usize),
}

/// A request as the predictor sees it: the trace, its compression plan and
/// the per-request quantities derived from them once.
#[derive(Debug, Clone)]
pub struct RequestView<'a> {
    pub trace: &'a RoutingTrace,
    pub plan: &'a CompressionPlan,
    retained: Vec<usize>,
    visual_summary: Vec<f64>,
    drift: Vec<Vec<f64>>,
}

impl<'a> RequestView<'a> {
    pub fn new(trace: &'a RoutingTrace, plan: &'a CompressionPlan) -> Self {
        let retained = plan.retained();
        let visual_summary = features::mean_embedding(trace, &plan.keep);
        let drift = features::layer_drift(trace.seed, trace.num_layers, trace.embed_dim);
        Self {
            trace,
            plan,
            retained,
            visual_summary,
            drift,
        }
    }

    /// Tokens whose routes make up demand in `phase`.
    pub fn tokens(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Prefill => &self.retained,
            Phase::Decode(s) => std::slice::from_ref(&self.trace.phase_marks[s]),
        }
    }

    /// Every phase of the request in execution order.
    pub fn phases(&self) -> Vec<Phase> {
        std::iter::once(Phase::Prefill)
            .chain((0..self.trace.decode_steps()).map(Phase::Decode))
            .collect()
    }

    /// Experts activated at `layer` by the tokens of `phase`.
    pub fn demand(&self, phase: Phase, layer: usize) -> BTreeSet<usize> {
        self.trace.union_experts(layer, self.tokens(phase))
    }

    /// Static mean embedding of the retained visual tokens, reused in decode.
    pub fn visual_summary(&self) -> &[f64] {
        &self.visual_summary
    }

    /// Synthetic hidden state of a token: embedding plus per-layer drift.
    pub fn hidden_state(&self, token: usize, layer: usize) -> Vec<f64> {
        self.trace.tokens[token]
            .embedding
            .iter()
            .zip(&self.drift[layer])
            .map(|(e, d)| e + d)
            .collect()
    }
}

/// The `b` highest-scoring expert ids, best first; ties go to the lower id.
pub fn predict_top_b(scores: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
    order.truncate(b);
    order
}

/// Share of the experts activated at `layer + 1` that appear in `predicted`.
/// An empty activation set counts as fully recalled.
pub fn hot_recall(predicted: &[usize], view: &RequestView<'_>, phase: Phase, layer: usize) -> Result<f64> {
    if layer + 1 >= view.trace.num_layers {
        return Err(Error::Contract(format!("hot recall needs a layer after {layer}")));
    }
    Ok(recall_against(predicted, &view.demand(phase, layer + 1)))
}

/// Like [`hot_recall`] but against the union of the next `window` layers.
pub fn window_recall(predicted: &[usize], view: &RequestView<'_>, phase: Phase, layer: usize, window: usize) -> f64 {
    let last = (layer + window).min(view.trace.num_layers - 1);
    let mut union = BTreeSet::new();
    for l in layer + 1..=last {
        union.extend(view.demand(phase, l));
    }
    recall_against(predicted, &union)
}

fn recall_against(predicted: &[usize], actual: &BTreeSet<usize>) -> f64 {
    if actual.is_empty() {
        return 1.0;
    }
    let hit = predicted
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|e| actual.contains(e))
        .count();
    hit as f64 / actual.len() as f64
}

/// Per-layer Hot Recall of one predictor, averaged over phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecall {
    pub layer: usize,
    pub hot_recall: f64,
    pub window_recall: f64,
    pub samples: usize,
}

/// Evaluates a predictor at every layer from `first_layer` to `L - 2` over
/// the given phases.
pub fn evaluate_recall(
    predictor: &dyn ExpertPredictor,
    view: &RequestView<'_>,
    phases: &[Phase],
    first_layer: usize,
    top_b: usize,
    window: usize,
) -> Result<Vec<LayerRecall>> {
    let last = view.trace.num_layers.saturating_sub(1);
    let mut out = Vec::new();
    for layer in first_layer..last {
        let (mut hot, mut win) = (0.0, 0.0);
        for &phase in phases {
            let predicted = predictor.predict(view, phase, layer, top_b)?;
            hot += hot_recall(&predicted, view, phase, layer)?;
            win += window_recall(&predicted, view, phase, layer, window);
        }
        let n = phases.len().max(1) as f64;
        out.push(LayerRecall {
            layer,
            hot_recall: hot / n,
            window_recall: win / n,
            samples: phases.len(),
        });
    }
    Ok(out)
}

/// Mean of the per-layer Hot Recall values.
pub fn mean_hot_recall(layers: &[LayerRecall]) -> f64 {
    if layers.is_empty() {
        return 0.0;
    }
    layers.iter().map(|l| l.hot_recall).sum::<f64>() / layers.len() as f64
}
