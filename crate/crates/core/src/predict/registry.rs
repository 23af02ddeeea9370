use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_features, build_targets, predict_top_b, MlpModel, Phase, RequestView};
use super::{DEFAULT_GAMMA, DEFAULT_TOP_B, DEFAULT_WINDOW};
use crate::error::{Error, Result};

/// Scores every expert id for the layers after `layer`.
pub trait ExpertPredictor: Send + Sync {
    fn name(&self) -> &'static str;

    /// Priority per expert id (length E); higher is more urgent.
    fn scores(&self, view: &RequestView<'_>, phase: Phase, layer: usize) -> Result<Vec<f64>>;

    /// Ordered prefetch candidates: the top `b` scores, ties to lower id.
    fn predict(&self, view: &RequestView<'_>, phase: Phase, layer: usize, b: usize) -> Result<Vec<usize>> {
        Ok(predict_top_b(&self.scores(view, phase, layer)?, b))
    }

    /// Maps a score onto the non-negative cache retention priority.
    fn priority(&self, score: f64) -> f64 {
        score
    }
}

/// Perfect knowledge of the decayed target within the window.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub window: usize,
    pub gamma: f64,
}

impl ExpertPredictor for OraclePredictor {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn scores(&self, view: &RequestView<'_>, phase: Phase, layer: usize) -> Result<Vec<f64>> {
        Ok(build_targets(view, phase, layer, self.window, self.gamma))
    }
}

/// Uniform draws without replacement, reproducible per (seed, phase, layer).
#[derive(Debug, Clone)]
pub struct RandomPredictor {
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExpertPredictor for RandomPredictor {
    fn name(&self) -> &'static str {
        "random"
    }

    fn scores(&self, view: &RequestView<'_>, phase: Phase, layer: usize) -> Result<Vec<f64>> {
        let phase_code = match phase {
            Phase::Prefill => 0,
            Phase::Decode(s) => s as u64 + 1,
        };
        let key = splitmix(splitmix(self.seed ^ (phase_code << 32)) ^ layer as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        // The top B of i.i.d. uniform scores is a uniform B-subset.
        Ok((0..view.trace.num_experts).map(|_| rng.random::<f64>()).collect())
    }
}

/// Ranks experts by the decayed routing histogram observed so far.
#[derive(Debug, Clone)]
pub struct HistoryPredictor {
    pub decay: f64,
}

impl ExpertPredictor for HistoryPredictor {
    fn name(&self) -> &'static str {
        "history"
    }

    fn scores(&self, view: &RequestView<'_>, phase: Phase, layer: usize) -> Result<Vec<f64>> {
        Ok(build_features(view, phase, layer, self.decay)?.routing)
    }
}

/// The trained bottleneck MLP.
#[derive(Debug, Clone)]
pub struct MlpPredictor {
    pub model: MlpModel,
}

impl ExpertPredictor for MlpPredictor {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn scores(&self, view: &RequestView<'_>, phase: Phase, layer: usize) -> Result<Vec<f64>> {
        let x = build_features(view, phase, layer, self.model.train_config.history_decay)?.concat();
        self.model.forward(&x)
    }

    /// Scores are logits; the cache keeps the predicted probability.
    fn priority(&self, score: f64) -> f64 {
        super::mlp::sigmoid(score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Oracle,
    Random,
    History,
    Mlp,
}

impl PredictorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::Oracle => "oracle",
            PredictorKind::Random => "random",
            PredictorKind::History => "history",
            PredictorKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(PredictorKind::Oracle),
            "random" => Ok(PredictorKind::Random),
            "history" => Ok(PredictorKind::History),
            "mlp" => Ok(PredictorKind::Mlp),
            other => Err(Error::invalid("predictor.kind", format!("unknown predictor {other:?}"))),
        }
    }
}

/// How to build a predictor and how many candidates to take from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub top_b: usize,
    pub window: usize,
    pub gamma: f64,
    /// History decay for the `history` baseline.
    pub history_decay: f64,
    pub seed: u64,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            kind: PredictorKind::History,
            top_b: DEFAULT_TOP_B,
            window: DEFAULT_WINDOW,
            gamma: DEFAULT_GAMMA,
            history_decay: 0.0,
            seed: 0,
        }
    }
}

type Factory = fn(&PredictorSpec, Option<&MlpModel>) -> Result<Box<dyn ExpertPredictor>>;

/// Name → constructor table for predictors.
pub struct PredictorRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl Default for PredictorRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("oracle", |s, _| {
            Ok(Box::new(OraclePredictor {
                window: s.window,
                gamma: s.gamma,
            }))
        });
        r.register("random", |s, _| Ok(Box::new(RandomPredictor { seed: s.seed })));
        r.register("history", |s, _| {
            Ok(Box::new(HistoryPredictor { decay: s.history_decay }))
        });
        r.register("mlp", |_, model| {
            let model = model
                .cloned()
                .ok_or_else(|| Error::invalid("predictor.kind", "the mlp predictor needs a trained model"))?;
            Ok(Box::new(MlpPredictor { model }))
        });
        r
    }
}

impl PredictorRegistry {
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, spec: &PredictorSpec, model: Option<&MlpModel>) -> Result<Box<dyn ExpertPredictor>> {
        let name = spec.kind.as_str();
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| Error::invalid("predictor.kind", format!("no predictor registered as {name:?}")))?;
        f(spec, model)
    }
}
