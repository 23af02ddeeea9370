//! Seeded synthetic routing traces.
//!
//! Each latent cluster prefers a small subset of experts (Zipf-weighted).
//! A token's layer-0 route is k weighted draws without replacement from its
//! cluster; each later layer keeps every entry with probability `rho` and
//! redraws it from the cluster otherwise. Kept entries of visual tokens are
//! resampled uniformly over all experts with probability `visual_noise`,
//! which produces the fragmented visual working sets the compressor targets.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Modality, Route, RoutingTrace, Token};
use crate::error::{Error, Result};

/// Log-normal saliency distribution for visual tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyShape {
    pub log_mean: f64,
    pub log_sigma: f64,
}

impl Default for SaliencyShape {
    fn default() -> Self {
        Self {
            log_mean: 0.0,
            log_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceGenConfig {
    pub num_visual: usize,
    pub num_text: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub shared_experts: usize,
    pub embed_dim: usize,
    pub clusters: usize,
    /// Experts each cluster spreads its preference over.
    pub cluster_support: usize,
    pub rho: f64,
    pub visual_noise: f64,
    pub saliency: SaliencyShape,
    /// Standard deviation of a token embedding around its cluster centroid.
    pub embed_noise: f64,
    pub decode_steps: usize,
    pub seed: u64,
    /// Seeds the cluster structure separately from the tokens, so traces
    /// with equal `model_seed` and different `seed` are requests to the same
    /// model. Unset, a single stream seeded by `seed` drives both.
    pub model_seed: Option<u64>,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        Self {
            num_visual: 64,
            num_text: 8,
            num_layers: 16,
            num_experts: 32,
            top_k: 4,
            shared_experts: 0,
            embed_dim: 16,
            clusters: 4,
            cluster_support: 8,
            rho: 0.8,
            visual_noise: 0.3,
            saliency: SaliencyShape::default(),
            embed_noise: 0.5,
            decode_steps: 4,
            seed: 0,
            model_seed: None,
        }
    }
}

impl TraceGenConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(
                    name,
                    format!("must be a probability in [0, 1], got {v}"),
                ))
            }
        };
        prob("rho", self.rho)?;
        prob("visual_noise", self.visual_noise)?;
        if self.num_layers == 0 {
            return Err(Error::invalid("num_layers", "must be at least 1"));
        }
        if self.num_experts == 0 {
            return Err(Error::invalid("num_experts", "must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::invalid(
                "top_k",
                format!("must be in [1, num_experts={}], got {}", self.num_experts, self.top_k),
            ));
        }
        if self.clusters == 0 {
            return Err(Error::invalid("clusters", "must be at least 1"));
        }
        if self.cluster_support < self.top_k || self.cluster_support > self.num_experts {
            return Err(Error::invalid(
                "cluster_support",
                format!(
                    "must be in [top_k={}, num_experts={}], got {}",
                    self.top_k, self.num_experts, self.cluster_support
                ),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim", "must be at least 1"));
        }
        if self.num_visual + self.num_text == 0 {
            return Err(Error::invalid("num_visual", "the prompt needs at least one token"));
        }
        if !self.saliency.log_mean.is_finite() {
            return Err(Error::invalid("saliency.log_mean", "must be finite"));
        }
        if !(self.saliency.log_sigma.is_finite() && self.saliency.log_sigma >= 0.0) {
            return Err(Error::invalid("saliency.log_sigma", "must be finite and >= 0"));
        }
        if !(self.embed_noise.is_finite() && self.embed_noise >= 0.0) {
            return Err(Error::invalid("embed_noise", "must be finite and >= 0"));
        }
        Ok(())
    }
}

struct Cluster {
    support: Vec<usize>,
    weights: Vec<f64>,
    centroid: Vec<f64>,
}

impl Cluster {
    /// Weighted draw from the cluster support, skipping `taken`. Falls back
    /// to a uniform draw when the whole support is already taken.
    fn draw(&self, rng: &mut ChaCha8Rng, taken: &[usize], num_experts: usize) -> usize {
        let total: f64 = self
            .support
            .iter()
            .zip(&self.weights)
            .filter(|(e, _)| !taken.contains(e))
            .map(|(_, w)| w)
            .sum();
        if total <= 0.0 {
            return uniform_excluding(rng, taken, num_experts);
        }
        let mut x = rng.random::<f64>() * total;
        let mut last = None;
        for (e, w) in self.support.iter().zip(&self.weights) {
            if taken.contains(e) {
                continue;
            }
            last = Some(*e);
            if x < *w {
                return *e;
            }
            x -= w;
        }
        last.expect("non-zero remaining weight implies a free support expert")
    }
}

fn uniform_excluding(rng: &mut ChaCha8Rng, taken: &[usize], num_experts: usize) -> usize {
    let free = num_experts - taken.len();
    let mut pick = rng.random_range(0..free);
    for e in 0..num_experts {
        if taken.contains(&e) {
            continue;
        }
        if pick == 0 {
            return e;
        }
        pick -= 1;
    }
    unreachable!("k <= E guarantees a free expert")
}

struct Generator<'a> {
    cfg: &'a TraceGenConfig,
    rng: ChaCha8Rng,
    clusters: Vec<Cluster>,
}

impl Generator<'_> {
    fn first_route(&mut self, cluster: usize) -> Vec<usize> {
        let mut route = Vec::with_capacity(self.cfg.top_k);
        for _ in 0..self.cfg.top_k {
            let e = self.clusters[cluster].draw(&mut self.rng, &route, self.cfg.num_experts);
            route.push(e);
        }
        route
    }

    /// Next route under persistence; `noisy` enables the visual resampling.
    fn persist(&mut self, prev: &[usize], cluster: usize, noisy: bool) -> Vec<usize> {
        let mut kept = Vec::with_capacity(prev.len());
        let mut resampled = 0;
        let mut redrawn = 0;
        for &e in prev {
            if self.rng.random::<f64>() < self.cfg.rho {
                if noisy && self.rng.random::<f64>() < self.cfg.visual_noise {
                    resampled += 1;
                } else {
                    kept.push(e);
                }
            } else {
                redrawn += 1;
            }
        }
        for _ in 0..resampled {
            let e = uniform_excluding(&mut self.rng, &kept, self.cfg.num_experts);
            kept.push(e);
        }
        for _ in 0..redrawn {
            let e = self.clusters[cluster].draw(&mut self.rng, &kept, self.cfg.num_experts);
            kept.push(e);
        }
        kept
    }

    fn gates(&mut self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.cfg.top_k).map(|_| 0.05 + self.rng.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|g| g / sum).collect()
    }

    fn embedding(&mut self, cluster: usize) -> Vec<f64> {
        let noise = self.cfg.embed_noise;
        (0..self.cfg.embed_dim)
            .map(|d| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                self.clusters[cluster].centroid[d] + noise * z
            })
            .collect()
    }
}

/// Generates a trace. The result is a pure function of `cfg`.
pub fn generate_trace(cfg: &TraceGenConfig) -> Result<RoutingTrace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed.unwrap_or(cfg.seed));
    let clusters = (0..cfg.clusters)
        .map(|_| {
            let support = index::sample(&mut rng, cfg.num_experts, cfg.cluster_support).into_vec();
            let weights = (0..cfg.cluster_support).map(|j| 1.0 / (j + 1) as f64).collect();
            let centroid = (0..cfg.embed_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            Cluster {
                support,
                weights,
                centroid,
            }
        })
        .collect();
    if cfg.model_seed.is_some() {
        // A separate stream keeps seed == model_seed from replaying the
        // cluster draws.
        rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
    }
    let mut g = Generator { cfg, rng, clusters };
    let saliency = LogNormal::new(cfg.saliency.log_mean, cfg.saliency.log_sigma)
        .map_err(|e| Error::invalid("saliency", e.to_string()))?;

    let prompt = cfg.num_visual + cfg.num_text;
    let total = prompt + cfg.decode_steps;
    let mut tokens = Vec::with_capacity(total);
    let mut token_cluster = Vec::with_capacity(total);
    for i in 0..total {
        let visual = i < cfg.num_visual;
        let cluster = g.rng.random_range(0..cfg.clusters);
        let s = if visual { saliency.sample(&mut g.rng) } else { 0.0 };
        let embedding = g.embedding(cluster);
        tokens.push(Token {
            id: i as u64,
            modality: if visual { Modality::Visual } else { Modality::Text },
            saliency: s,
            embedding,
            cluster: Some(cluster as u32),
        });
        token_cluster.push(cluster);
    }

    // Layer-major persistence for prompt tokens and the first decode token;
    // later decode tokens persist from the previous step at the same layer.
    let mut experts = vec![vec![Vec::new(); total]; cfg.num_layers];
    let chain_end = if cfg.decode_steps > 0 { prompt + 1 } else { prompt };
    for t in 0..chain_end {
        let noisy = t < cfg.num_visual;
        experts[0][t] = g.first_route(token_cluster[t]);
        for l in 1..cfg.num_layers {
            let prev = experts[l - 1][t].clone();
            experts[l][t] = g.persist(&prev, token_cluster[t], noisy);
        }
    }
    for t in chain_end..total {
        token_cluster[t] = token_cluster[t - 1];
        tokens[t].cluster = Some(token_cluster[t] as u32);
        for layer in experts.iter_mut() {
            layer[t] = g.persist(&layer[t - 1], token_cluster[t], false);
        }
    }

    let routes = experts
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|e| Route {
                    experts: e,
                    gates: g.gates(),
                })
                .collect()
        })
        .collect();

    Ok(RoutingTrace {
        num_layers: cfg.num_layers,
        num_experts: cfg.num_experts,
        top_k: cfg.top_k,
        embed_dim: cfg.embed_dim,
        shared_experts: cfg.shared_experts,
        seed: cfg.model_seed.unwrap_or(cfg.seed),
        tokens,
        routes,
        phase_marks: (prompt..total).collect(),
    })
}
