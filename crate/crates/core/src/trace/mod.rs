//! Routing traces: the per-layer, per-token expert assignments every other
//! module consumes.
//!
//! A trace holds the prompt tokens (visual patches followed by text) and,
//! optionally, one generated token per decode step. Routes are recorded once
//! and never recomputed; compression only chooses which recorded routes stay
//! in the working set.

mod generate;
mod io;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use generate::{generate_trace, SaliencyShape, TraceGenConfig};
pub use io::{load_trace, read_trace, save_trace, write_trace, TRACE_VERSION};

/// Gate weights of one route must sum to one within this tolerance.
pub const GATE_SUM_TOLERANCE: f64 = 1e-9;

/// One expert of one MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpertRef {
    pub layer: usize,
    pub expert: usize,
}

impl ExpertRef {
    pub fn new(layer: usize, expert: usize) -> Self {
        Self { layer, expert }
    }
}

impl fmt::Display for ExpertRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/E{}", self.layer, self.expert)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub id: u64,
    pub modality: Modality,
    /// Raw saliency. Text tokens are never pruned, so their value is unused.
    pub saliency: f64,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<u32>,
}

impl Token {
    pub fn is_visual(&self) -> bool {
        self.modality == Modality::Visual
    }
}

/// The k experts a token is routed to at one layer, with their gate weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub embed_dim: usize,
    /// Always-resident shared experts per layer (not part of `routes`).
    pub shared_experts: usize,
    /// Seed of the model-level structure, used to derive the per-layer
    /// hidden-state drift.
    pub seed: u64,
    pub tokens: Vec<Token>,
    /// `routes[layer][token]`.
    pub routes: Vec<Vec<Route>>,
    /// Token index of the generated token of each decode step.
    pub phase_marks: Vec<usize>,
}

impl RoutingTrace {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn experts(&self, layer: usize, token: usize) -> &[usize] {
        &self.routes[layer][token].experts
    }

    /// Number of prompt (prefill) tokens; decode tokens follow them.
    pub fn prefill_len(&self) -> usize {
        self.phase_marks.first().copied().unwrap_or(self.tokens.len())
    }

    pub fn decode_steps(&self) -> usize {
        self.phase_marks.len()
    }

    pub fn decode_token(&self, step: usize) -> usize {
        self.phase_marks[step]
    }

    /// Indices of the visual prompt tokens, in trace order.
    pub fn visual_indices(&self) -> Vec<usize> {
        (0..self.prefill_len())
            .filter(|&i| self.tokens[i].is_visual())
            .collect()
    }

    pub fn text_prefill_indices(&self) -> Vec<usize> {
        (0..self.prefill_len())
            .filter(|&i| !self.tokens[i].is_visual())
            .collect()
    }

    pub fn prefill_indices(&self) -> Vec<usize> {
        (0..self.prefill_len()).collect()
    }

    /// Union of the routed experts of `tokens` at `layer`.
    pub fn union_experts(&self, layer: usize, tokens: &[usize]) -> BTreeSet<usize> {
        tokens
            .iter()
            .flat_map(|&t| self.experts(layer, t).iter().copied())
            .collect()
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_trace(self)
    }
}

/// One broken invariant, located as precisely as the check allows.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub token: Option<usize>,
    pub field: &'static str,
    pub message: String,
}

impl Violation {
    fn global(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            layer: None,
            token: None,
            field,
            message: message.into(),
        }
    }

    fn token(token: usize, field: &'static str, message: impl Into<String>) -> Self {
        Self {
            layer: None,
            token: Some(token),
            field,
            message: message.into(),
        }
    }

    fn route(layer: usize, token: usize, field: &'static str, message: impl Into<String>) -> Self {
        Self {
            layer: Some(layer),
            token: Some(token),
            field,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.layer {
            write!(f, "layer {l} ")?;
        }
        if let Some(t) = self.token {
            write!(f, "token {t} ")?;
        }
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every trace invariant. An empty list means the trace is valid.
pub fn validate_trace(trace: &RoutingTrace) -> Vec<Violation> {
    let mut out = Vec::new();
    let (l_count, e_count, k) = (trace.num_layers, trace.num_experts, trace.top_k);
    if l_count == 0 {
        out.push(Violation::global("L", "must be at least 1"));
    }
    if k == 0 || k > e_count {
        out.push(Violation::global("k", format!("must be in [1, E={e_count}], got {k}")));
    }

    let mut ids = BTreeSet::new();
    for (i, tok) in trace.tokens.iter().enumerate() {
        if !ids.insert(tok.id) {
            out.push(Violation::token(i, "id", format!("duplicate token id {}", tok.id)));
        }
        if !tok.saliency.is_finite() || tok.saliency < 0.0 {
            out.push(Violation::token(
                i,
                "saliency",
                format!("must be finite and >= 0, got {}", tok.saliency),
            ));
        }
        if tok.embedding.len() != trace.embed_dim {
            out.push(Violation::token(
                i,
                "embedding",
                format!("expected {} entries, got {}", trace.embed_dim, tok.embedding.len()),
            ));
        } else if tok.embedding.iter().any(|x| !x.is_finite()) {
            out.push(Violation::token(i, "embedding", "non-finite entry"));
        }
    }

    let mut last = None;
    for (s, &m) in trace.phase_marks.iter().enumerate() {
        if m >= trace.tokens.len() || last.is_some_and(|p| m <= p) {
            out.push(Violation::global(
                "phase_marks",
                format!("mark {s} = {m} is out of range or not increasing"),
            ));
        }
        last = Some(m);
    }

    if trace.routes.len() != l_count {
        out.push(Violation::global(
            "routes",
            format!("expected {l_count} layers, got {}", trace.routes.len()),
        ));
    }
    for (l, layer) in trace.routes.iter().enumerate() {
        if layer.len() != trace.tokens.len() {
            out.push(Violation::route(
                l,
                layer.len(),
                "routes",
                format!("expected {} token routes, got {}", trace.tokens.len(), layer.len()),
            ));
        }
        for (t, route) in layer.iter().enumerate() {
            check_route(route, l, t, e_count, k, &mut out);
        }
    }
    out
}

fn check_route(route: &Route, l: usize, t: usize, e_count: usize, k: usize, out: &mut Vec<Violation>) {
    if route.experts.len() != k {
        out.push(Violation::route(
            l,
            t,
            "experts",
            format!("expected {k} experts, got {}", route.experts.len()),
        ));
    }
    if let Some(&bad) = route.experts.iter().find(|&&e| e >= e_count) {
        out.push(Violation::route(
            l,
            t,
            "experts",
            format!("expert id {bad} >= E={e_count}"),
        ));
    }
    let distinct: BTreeSet<_> = route.experts.iter().collect();
    if distinct.len() != route.experts.len() {
        out.push(Violation::route(l, t, "experts", "duplicate expert id"));
    }
    if route.gates.len() != route.experts.len() {
        out.push(Violation::route(
            l,
            t,
            "gates",
            format!("{} gates for {} experts", route.gates.len(), route.experts.len()),
        ));
    } else if route.gates.iter().any(|g| !g.is_finite() || *g <= 0.0) {
        out.push(Violation::route(
            l,
            t,
            "gates",
            "gate weights must be finite and positive",
        ));
    } else {
        let sum: f64 = route.gates.iter().sum();
        if (sum - 1.0).abs() > GATE_SUM_TOLERANCE {
            out.push(Violation::route(
                l,
                t,
                "gates",
                format!("gate weights sum to {sum}, expected 1"),
            ));
        }
    }
}
