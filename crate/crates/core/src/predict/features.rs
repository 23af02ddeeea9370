use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Phase, RequestView};
use crate::error::{Error, Result};
use crate::trace::RoutingTrace;

/// Per-dimension standard deviation of one layer's hidden-state drift step.
const DRIFT_STEP: f64 = 0.1;

/// Predictor input: routing history, hidden-state summary and the static
/// visual summary, concatenated by [`FeatureVector::concat`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub routing: Vec<f64>,
    pub hidden: Vec<f64>,
    pub visual: Vec<f64>,
}

impl FeatureVector {
    pub fn concat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        x.extend_from_slice(&self.routing);
        x.extend_from_slice(&self.hidden);
        x.extend_from_slice(&self.visual);
        x
    }

    pub fn len(&self) -> usize {
        self.routing.len() + self.hidden.len() + self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn mean_embedding(trace: &RoutingTrace, tokens: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; trace.embed_dim];
    for &t in tokens {
        for (a, v) in acc.iter_mut().zip(&trace.tokens[t].embedding) {
            *a += v;
        }
    }
    if !tokens.is_empty() {
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    acc
}

/// Deterministic random-walk drift per layer, starting at zero for layer 0.
/// Nearby layers get similar hidden states, as in a residual stream.
pub(crate) fn layer_drift(seed: u64, layers: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d81f_7000_0000);
    let step = Normal::new(0.0, DRIFT_STEP).expect("constant std-dev is valid");
    let mut cur = vec![0.0; dim];
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        if l > 0 {
            for c in cur.iter_mut() {
                *c += step.sample(&mut rng);
            }
        }
        out.push(cur.clone());
    }
    out
}

/// Builds the predictor input at `layer` for the tokens of `phase`.
///
/// The routing histogram weights activations at layer `l' <= layer` by
/// `history_decay^(layer - l')` and is normalized to unit sum.
pub fn build_features(view: &RequestView<'_>, phase: Phase, layer: usize, history_decay: f64) -> Result<FeatureVector> {
    let trace = view.trace;
    let tokens = view.tokens(phase);
    if tokens.is_empty() {
        return Err(Error::Contract("features need at least one retained token".into()));
    }
    if layer >= trace.num_layers {
        return Err(Error::Contract(format!(
            "layer {layer} outside trace (L={})",
            trace.num_layers
        )));
    }

    let mut routing = vec![0.0; trace.num_experts];
    let mut weight = 1.0;
    for l in (0..=layer).rev() {
        if weight == 0.0 {
            break;
        }
        for &t in tokens {
            for &e in trace.experts(l, t) {
                routing[e] += weight;
            }
        }
        weight *= history_decay;
    }
    let total: f64 = routing.iter().sum();
    if total > 0.0 {
        routing.iter_mut().for_each(|r| *r /= total);
    }

    let mut hidden = vec![0.0; trace.embed_dim];
    for &t in tokens {
        for (h, v) in hidden.iter_mut().zip(view.hidden_state(t, layer)) {
            *h += v;
        }
    }
    let n = tokens.len() as f64;
    hidden.iter_mut().for_each(|h| *h /= n);

    Ok(FeatureVector {
        routing,
        hidden,
        visual: view.visual_summary().to_vec(),
    })
}
