//! Bottleneck MLP trained with soft binary cross-entropy.
//!
//! `y = Wo relu(W2 relu(W1 x + b1) + b2) + bo`, with inverted dropout after
//! each ReLU during training only. Matrices are row-major `[out][in]`.

#![allow(clippy::needless_range_loop)]

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Example;
use super::{DEFAULT_GAMMA, DEFAULT_WINDOW};
use crate::error::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Target decay per layer of lookahead distance.
    pub gamma: f64,
    /// Lookahead window W.
    pub window: usize,
    pub dropout_rate: f64,
    /// Decay of the routing-history histogram in the features.
    pub history_decay: f64,
    /// Hidden width; defaults to 4 * E.
    pub hidden: Option<usize>,
    /// Bottleneck width; defaults to E.
    pub bottleneck: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            gamma: DEFAULT_GAMMA,
            window: DEFAULT_WINDOW,
            dropout_rate: 0.1,
            history_decay: 0.5,
            hidden: None,
            bottleneck: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(
                "gamma",
                format!("must be in (0, 1], got {}", self.gamma),
            ));
        }
        if self.window == 0 {
            return Err(Error::invalid("window", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(
                "dropout_rate",
                format!("must be in [0, 1), got {}", self.dropout_rate),
            ));
        }
        if !(self.history_decay.is_finite() && self.history_decay >= 0.0) {
            return Err(Error::invalid("history_decay", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub output: usize,
}

impl MlpDims {
    pub fn parameter_count(&self) -> usize {
        self.hidden * (self.input + 1) + self.bottleneck * (self.hidden + 1) + self.output * (self.bottleneck + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
}

impl MlpWeights {
    fn zeros(d: MlpDims) -> Self {
        Self {
            w1: vec![0.0; d.hidden * d.input],
            b1: vec![0.0; d.hidden],
            w2: vec![0.0; d.bottleneck * d.hidden],
            b2: vec![0.0; d.bottleneck],
            wo: vec![0.0; d.output * d.bottleneck],
            bo: vec![0.0; d.output],
        }
    }

    fn parts(&self) -> [&Vec<f64>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.wo, &self.bo]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    fn flatten(&self) -> Vec<f64> {
        self.parts().iter().flat_map(|p| p.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub version: u32,
    pub dims: MlpDims,
    pub weights: MlpWeights,
    pub train_config: TrainConfig,
    pub final_loss: Option<f64>,
}

/// `W x + b` for a row-major `[out][in]` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| {
            bias + w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, v)| a * v)
                .sum::<f64>()
        })
        .collect()
}

fn softplus(y: f64) -> f64 {
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Soft BCE of `sigmoid(y)` against `g`, summed over experts.
fn bce_with_logits(y: &[f64], g: &[f64]) -> f64 {
    y.iter().zip(g).map(|(y, g)| softplus(*y) - g * y).sum()
}

struct Activations {
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    y: Vec<f64>,
}

impl MlpModel {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    pub fn init(dims: MlpDims, train_config: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        let mut w = MlpWeights::zeros(dims);
        let mut fill = |m: &mut Vec<f64>, fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            m.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
        };
        fill(&mut w.w1, dims.input);
        fill(&mut w.w2, dims.hidden);
        fill(&mut w.wo, dims.bottleneck);
        Self {
            version: MODEL_VERSION,
            dims,
            weights: w,
            train_config,
            final_loss: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let w = &self.weights;
        let expected = [
            ("w1", w.w1.len(), d.hidden * d.input),
            ("b1", w.b1.len(), d.hidden),
            ("w2", w.w2.len(), d.bottleneck * d.hidden),
            ("b2", w.b2.len(), d.bottleneck),
            ("wo", w.wo.len(), d.output * d.bottleneck),
            ("bo", w.bo.len(), d.output),
        ];
        for (name, got, want) in expected {
            if got != want {
                return Err(Error::invalid(name, format!("expected {want} weights, got {got}")));
            }
        }
        if w.parts().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("weights", "non-finite weight"));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.input {
            return Err(Error::Contract(format!(
                "feature length {} does not match model input {}",
                x.len(),
                self.dims.input
            )));
        }
        Ok(())
    }

    fn forward_masked(&self, x: &[f64], masks: Option<(&[f64], &[f64])>) -> Activations {
        let w = &self.weights;
        let a1 = affine(&w.w1, &w.b1, x);
        let mut h1: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
        if let Some((m1, _)) = masks {
            h1.iter_mut().zip(m1).for_each(|(h, m)| *h *= m);
        }
        let a2 = affine(&w.w2, &w.b2, &h1);
        let mut h2: Vec<f64> = a2.iter().map(|v| v.max(0.0)).collect();
        if let Some((_, m2)) = masks {
            h2.iter_mut().zip(m2).for_each(|(h, m)| *h *= m);
        }
        let y = affine(&w.wo, &w.bo, &h2);
        Activations { a1, h1, a2, h2, y }
    }

    /// Inference forward pass (no dropout).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_masked(x, None).y)
    }

    /// Mean soft-BCE loss over `data`, without dropout.
    pub fn loss(&self, data: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for ex in data {
            self.check_input(&ex.features)?;
            total += bce_with_logits(&self.forward_masked(&ex.features, None).y, &ex.targets);
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// Loss and its gradient over `data` without dropout, flattened in
    /// [`MlpModel::parameters`] order.
    pub fn gradient(&self, data: &[Example]) -> Result<(f64, Vec<f64>)> {
        for ex in data {
            self.check_input(&ex.features)?;
        }
        let refs: Vec<&Example> = data.iter().collect();
        let (loss, g) = self.batch_gradient(&refs, None);
        Ok((loss, g.flatten()))
    }

    fn batch_gradient(&self, batch: &[&Example], masks: Option<&[(Vec<f64>, Vec<f64>)]>) -> (f64, MlpWeights) {
        let d = self.dims;
        let w = &self.weights;
        let mut g = MlpWeights::zeros(d);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            let m = masks.map(|m| (m[i].0.as_slice(), m[i].1.as_slice()));
            let act = self.forward_masked(&ex.features, m);
            loss += bce_with_logits(&act.y, &ex.targets) * scale;

            let dy: Vec<f64> = act
                .y
                .iter()
                .zip(&ex.targets)
                .map(|(y, t)| (sigmoid(*y) - t) * scale)
                .collect();
            let mut dh2 = vec![0.0; d.bottleneck];
            for (o, dyo) in dy.iter().enumerate() {
                g.bo[o] += dyo;
                let row = o * d.bottleneck;
                for j in 0..d.bottleneck {
                    g.wo[row + j] += dyo * act.h2[j];
                    dh2[j] += w.wo[row + j] * dyo;
                }
            }
            let da2: Vec<f64> = (0..d.bottleneck)
                .map(|j| {
                    let mask = m.map_or(1.0, |m| m.1[j]);
                    if act.a2[j] > 0.0 {
                        dh2[j] * mask
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut dh1 = vec![0.0; d.hidden];
            for (j, daj) in da2.iter().enumerate() {
                if *daj == 0.0 {
                    continue;
                }
                g.b2[j] += daj;
                let row = j * d.hidden;
                for h in 0..d.hidden {
                    g.w2[row + h] += daj * act.h1[h];
                    dh1[h] += w.w2[row + h] * daj;
                }
            }
            for h in 0..d.hidden {
                let mask = m.map_or(1.0, |m| m.0[h]);
                if act.a1[h] <= 0.0 {
                    continue;
                }
                let da = dh1[h] * mask;
                if da == 0.0 {
                    continue;
                }
                g.b1[h] += da;
                let row = h * d.input;
                for (i, x) in ex.features.iter().enumerate() {
                    g.w1[row + i] += da * x;
                }
            }
        }
        (loss, g)
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.weights.flatten()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.dims.parameter_count() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.dims.parameter_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for part in self.weights.parts_mut() {
            let n = part.len();
            part.copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.version != MODEL_VERSION {
            return Err(Error::invalid(
                "version",
                format!("unsupported model version {}", m.version),
            ));
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Mini-batch SGD with a fixed learning rate. Shuffling and dropout masks
/// come from the config seed, so training is deterministic.
pub fn train(data: &[Example], cfg: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::invalid("dataset", "training needs at least one example"))?;
    let (input, output) = (first.features.len(), first.targets.len());
    if let Some(i) = data
        .iter()
        .position(|e| e.features.len() != input || e.targets.len() != output)
    {
        return Err(Error::invalid(
            "dataset",
            format!("example {i} has inconsistent dimensions"),
        ));
    }
    if let Some(i) = data
        .iter()
        .position(|e| e.features.iter().chain(&e.targets).any(|v| !v.is_finite()))
    {
        return Err(Error::invalid("dataset", format!("example {i} has a non-finite value")));
    }
    let dims = MlpDims {
        input,
        hidden: cfg.hidden.unwrap_or(4 * output),
        bottleneck: cfg.bottleneck.unwrap_or(output),
        output,
    };
    let mut model = MlpModel::init(dims, cfg.clone());
    let initial_loss = model.loss(data)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1b5_4a32_d192_ed03);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let masks: Vec<(Vec<f64>, Vec<f64>)> = batch
                .iter()
                .map(|_| {
                    (
                        dropout_mask(&mut mask_rng, dims.hidden, cfg.dropout_rate),
                        dropout_mask(&mut mask_rng, dims.bottleneck, cfg.dropout_rate),
                    )
                })
                .collect();
            let (loss, grad) = model.batch_gradient(&batch, Some(&masks));
            if !loss.is_finite() {
                return Err(Error::Training { step });
            }
            if cfg.learning_rate > 0.0 {
                for (p, g) in model.weights.parts_mut().into_iter().zip(grad.parts()) {
                    p.iter_mut()
                        .zip(g.iter())
                        .for_each(|(p, g)| *p -= cfg.learning_rate * g);
                }
            }
            step += 1;
        }
    }
    let final_loss = model.loss(data)?;
    if !final_loss.is_finite() {
        return Err(Error::Training { step });
    }
    model.final_loss = Some(final_loss);
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
            steps: step,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(input: usize, hidden: usize, bottleneck: usize, output: usize) -> MlpDims {
        MlpDims {
            input,
            hidden,
            bottleneck,
            output,
        }
    }

    fn scalar_chain(w: f64) -> MlpModel {
        let mut m = MlpModel::init(dims(1, 1, 1, 1), TrainConfig::default());
        m.set_parameters(&[w, 0.0, w, 0.0, w, 0.0]).unwrap();
        m
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = MlpModel::init(dims(3, 4, 2, 5), TrainConfig::default());
        m.set_parameters(&vec![0.0; m.dims.parameter_count()]).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn identity_chain_passes_positive_input() {
        assert_eq!(scalar_chain(1.0).forward(&[2.0]).unwrap(), vec![2.0]);
        // A negative pre-activation is cut by the ReLU.
        assert_eq!(scalar_chain(1.0).forward(&[-2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = MlpModel::init(dims(3, 4, 2, 5), TrainConfig::default());
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn repeated_example_loss_decreases() {
        let ex = Example {
            features: vec![0.5, -0.2, 0.1],
            targets: vec![1.0, 0.0, 0.64],
        };
        let data = vec![ex; 8];
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            dropout_rate: 0.0,
            ..Default::default()
        };
        let (_, report) = train(&data, &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss, "{report:?}");
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let data = vec![Example {
            features: vec![0.3, 0.7],
            targets: vec![1.0, 0.0],
        }];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let (model, _) = train(&data, &cfg).unwrap();
        let init = MlpModel::init(model.dims, cfg);
        assert_eq!(model.weights, init.weights);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data: Vec<Example> = (0..10)
            .map(|i| Example {
                features: vec![i as f64 / 10.0, 1.0 - i as f64 / 10.0],
                targets: vec![(i % 2) as f64, 0.8],
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 3,
            dropout_rate: 0.3,
            ..Default::default()
        };
        let (a, _) = train(&data, &cfg).unwrap();
        let (b, _) = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = train(&data, &TrainConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let data = vec![Example {
            features: vec![f64::NAN, 1.0],
            targets: vec![1.0],
        }];
        assert!(matches!(
            train(&data, &TrainConfig::default()),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn overflowing_training_reports_step() {
        let data = vec![Example {
            features: vec![1e300, 1e300],
            targets: vec![0.5],
        }];
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..Default::default()
        };
        let r = train(&data, &cfg);
        assert!(matches!(r, Err(Error::Training { .. })), "{:?}", r.map(|m| m.1));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<Example> = (0..4)
            .map(|_| Example {
                features: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                targets: (0..3).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect();
        let model = MlpModel::init(
            dims(5, 6, 4, 3),
            TrainConfig {
                seed: 3,
                ..Default::default()
            },
        );
        let (_, analytic) = model.gradient(&data).unwrap();
        let base = model.parameters();
        let h = 1e-6;
        let mut probe = model.clone();
        let numeric: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += h;
                probe.set_parameters(&p).unwrap();
                let up = probe.loss(&data).unwrap();
                p[i] -= 2.0 * h;
                probe.set_parameters(&p).unwrap();
                let down = probe.loss(&data).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    #[test]
    fn model_file_round_trips() {
        let m = MlpModel::init(dims(3, 4, 2, 5), TrainConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(MlpModel::load(&path).unwrap(), m);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["version", "dims", "weights", "train_config", "final_loss"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
