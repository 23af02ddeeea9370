//! Interchangeable visual-token retention policies, selectable by name.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{budget, compress, CompressionConfig, CompressionPlan};
use crate::error::{Error, Result};
use crate::trace::RoutingTrace;

/// Decides which visual prompt tokens survive compression.
pub trait RetentionPolicy: Send + Sync {
    fn name(&self) -> &'static str;
    fn retain(&self, trace: &RoutingTrace) -> Result<CompressionPlan>;
}

/// Saliency core plus working-set-aware extras.
#[derive(Debug, Clone)]
pub struct AffinityAware(pub CompressionConfig);

impl RetentionPolicy for AffinityAware {
    fn name(&self) -> &'static str {
        "affinity"
    }

    fn retain(&self, trace: &RoutingTrace) -> Result<CompressionPlan> {
        compress(trace, &self.0)
    }
}

/// Top tokens by saliency alone (the same rule with `lambda = 0`).
#[derive(Debug, Clone)]
pub struct SaliencyOnly(pub CompressionConfig);

impl RetentionPolicy for SaliencyOnly {
    fn name(&self) -> &'static str {
        "saliency"
    }

    fn retain(&self, trace: &RoutingTrace) -> Result<CompressionPlan> {
        compress(
            trace,
            &CompressionConfig {
                lambda: 0.0,
                ..self.0.clone()
            },
        )
    }
}

/// `floor(beta * N)` visual tokens drawn uniformly without replacement.
#[derive(Debug, Clone)]
pub struct UniformRandom {
    pub beta: f64,
    pub seed: u64,
}

impl RetentionPolicy for UniformRandom {
    fn name(&self) -> &'static str {
        "random"
    }

    fn retain(&self, trace: &RoutingTrace) -> Result<CompressionPlan> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta", format!("must be in [0, 1], got {}", self.beta)));
        }
        let mut plan = CompressionPlan::keep_all(trace);
        let n = plan.visual.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut keep: Vec<usize> = index::sample(&mut rng, n, budget(self.beta, n))
            .into_iter()
            .map(|p| plan.visual[p])
            .collect();
        keep.sort_unstable();
        plan.keep = keep;
        Ok(plan)
    }
}

/// No compression.
#[derive(Debug, Clone, Copy)]
pub struct KeepAll;

impl RetentionPolicy for KeepAll {
    fn name(&self) -> &'static str {
        "none"
    }

    fn retain(&self, trace: &RoutingTrace) -> Result<CompressionPlan> {
        Ok(CompressionPlan::keep_all(trace))
    }
}

type Factory = fn(&CompressionConfig, u64) -> Box<dyn RetentionPolicy>;

/// Name → constructor table for retention policies.
pub struct RetentionRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl Default for RetentionRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("affinity", |c, _| Box::new(AffinityAware(c.clone())));
        r.register("saliency", |c, _| Box::new(SaliencyOnly(c.clone())));
        r.register("random", |c, seed| Box::new(UniformRandom { beta: c.beta, seed }));
        r.register("none", |_, _| Box::new(KeepAll));
        r
    }
}

impl RetentionRegistry {
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, name: &str, cfg: &CompressionConfig, seed: u64) -> Result<Box<dyn RetentionPolicy>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::invalid(
                "retention",
                format!(
                    "unknown policy {name:?}; known: {}",
                    self.names().collect::<Vec<_>>().join(", ")
                ),
            )
        })?;
        Ok(f(cfg, seed))
    }
}
