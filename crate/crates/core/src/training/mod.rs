//! Joint weighted-MSE training with warm-up Adam and early stopping, plus
//! evaluation metrics and the two long-horizon rollout strategies.

mod metrics;
mod rollout;

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::MetricAccumulator;
pub use rollout::{
    compare_strategies, evaluate, rollout_consecutive, rollout_multi_step, Feedback, RolloutError, StrategyCurves,
    CURVE_HEADER,
};

use crate::model::{ConfigError, Dsan, Sample};
use crate::tensor::{Adam, AdamConfig, Graph, Mode, ParamStore, Tensor, TensorError, Var};

/// Long-horizon prediction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One step for the whole map at a time, fed back as input.
    MultiStep,
    /// One autoregressive pass per target grid.
    #[default]
    Consecutive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Per-step loss weights; empty means uniform. Normalized to sum to one.
    pub weights: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub warmup: u64,
    pub seed: u64,
    /// Share of training first steps, latest by time, held out for validation.
    pub val_fraction: f64,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: Vec::new(),
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            warmup: AdamConfig::default().warmup_steps,
            seed: 0,
            val_fraction: 0.2,
            strategy: Strategy::default(),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self, horizon: usize) -> Vec<String> {
        let mut v = Vec::new();
        if !self.weights.is_empty() {
            if self.weights.len() != horizon {
                v.push(format!(
                    "{} joint weights given for a horizon of {horizon}",
                    self.weights.len()
                ));
            }
            if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                v.push("joint weights must be finite and non-negative".to_string());
            } else if self.weights.iter().sum::<f64>() <= 0.0 {
                v.push("at least one joint weight must be positive".to_string());
            }
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".to_string());
        }
        if self.warmup == 0 {
            v.push("warmup must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            v.push(format!("val_fraction ({}) must lie in [0, 1)", self.val_fraction));
        }
        v
    }

    /// Normalized joint weights for `horizon` steps.
    pub fn resolved_weights(&self, horizon: usize) -> Result<Vec<f64>, ConfigError> {
        ConfigError::check(self.violations(horizon))?;
        if self.weights.is_empty() {
            return Ok(vec![1.0 / horizon as f64; horizon]);
        }
        Ok(normalize_weights(&self.weights))
    }
}

pub fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// `share` on the first step and the rest spread evenly over the others.
pub fn front_loaded_weights(horizon: usize, share: f64) -> Vec<f64> {
    if horizon == 1 {
        return vec![1.0];
    }
    let rest = (1.0 - share) / (horizon - 1) as f64;
    std::iter::once(share)
        .chain(std::iter::repeat_n(rest, horizon - 1))
        .collect()
}

/// `Σ_t w_t ‖pred_t − truth_t‖² / batch` for one sample's `F × b` prediction.
pub fn weighted_mse(
    g: &mut Graph,
    pred: Var,
    truth: &Tensor,
    weights: &[f64],
    batch: usize,
) -> Result<Var, TensorError> {
    let f = truth.shape()[0];
    if weights.len() != f {
        return Err(TensorError::ShapeMismatch {
            op: "weighted_mse",
            lhs: truth.shape().to_vec(),
            rhs: vec![weights.len()],
        });
    }
    let t = g.constant(truth.clone());
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    let w = g.constant(Tensor::new([f, 1], weights.to_vec())?);
    let weighted = g.mul(sq, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / batch as f64))
}

/// Evaluation-mode teacher-forced loss of one sample.
pub fn sample_loss(model: &Dsan, sample: &Sample, weights: &[f64]) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let p = g.bind(model.params());
    let pred = model.forward(&mut g, &p, sample, &mut Mode::Eval)?;
    let loss = weighted_mse(&mut g, pred, &sample.y, weights, 1)?;
    Ok(g.value(loss).data()[0])
}

pub fn mean_loss(model: &Dsan, samples: &[Sample], weights: &[f64]) -> Result<Option<f64>, TensorError> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(model, s, weights)?;
    }
    Ok(Some(total / samples.len() as f64))
}

/// Splits samples (ordered by first step) so the latest `fraction` of distinct
/// first steps form the validation set.
pub fn split_validation(samples: Vec<Sample>, fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let mut t1s: Vec<usize> = samples.iter().map(|s| s.t1).collect();
    t1s.dedup();
    let held = (t1s.len() as f64 * fraction).round() as usize;
    if held == 0 {
        return (samples, Vec::new());
    }
    let cut = t1s[t1s.len() - held];
    samples.into_iter().partition(|s| s.t1 < cut)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn accumulate_batch(
    model: &Dsan,
    batch: &[&Sample],
    weights: &[f64],
    dropout_rng: &mut ChaCha8Rng,
    grads: &mut [Vec<f64>],
) -> Result<f64, TensorError> {
    for g in grads.iter_mut() {
        g.fill(0.0);
    }
    let mut loss_sum = 0.0;
    for sample in batch {
        let mut g = Graph::new();
        let p = g.bind(model.params());
        let mut mode = Mode::Train(dropout_rng);
        let pred = model.forward(&mut g, &p, sample, &mut mode)?;
        let loss = weighted_mse(&mut g, pred, &sample.y, weights, batch.len())?;
        loss_sum += g.value(loss).data()[0];
        let grad = g.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(p.vars()) {
            if let Some(d) = grad.get(v) {
                for (a, x) in acc.iter_mut().zip(d) {
                    *a += x;
                }
            }
        }
    }
    Ok(loss_sum)
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the lowest validation loss (training loss when `val` is empty).
pub fn train(
    model: &mut Dsan,
    train_set: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let weights = cfg.resolved_weights(model.config().horizon)?;
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    if cfg.max_epochs == 0 || train_set.is_empty() {
        return Ok(outcome);
    }
    let adam_cfg = AdamConfig {
        warmup_steps: cfg.warmup,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(model.params(), model.config().d_model, adam_cfg);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut grads: Vec<Vec<f64>> = model.params().tensors().map(|t| vec![0.0; t.len()]).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut lr = adam.next_lr();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = accumulate_batch(model, &batch, &weights, &mut dropout_rng, &mut grads)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi, loss });
            }
            total += loss * batch.len() as f64;
            lr = adam.step(model.params_mut(), &grads);
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = mean_loss(model, val, &weights)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&record);
        outcome.history.push(record);

        let score = val_loss.unwrap_or(train_loss);
        if !score.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: usize::MAX,
                loss: score,
            });
        }
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.params().clone()));
            outcome.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(outcome)
}

/// Delimited `epoch,train_loss,val_loss,lr` table.
pub fn write_history(w: &mut impl Write, history: &[EpochRecord]) -> io::Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,lr")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{}",
            r.epoch,
            r.train_loss,
            metrics::fmt_opt(r.val_loss),
            r.lr
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::check::relative_error;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut g = Graph::new();
        let y = Tensor::from_fn([3, 2], |i| i as f64 * 0.1);
        let pred = g.constant(y.clone());
        let loss = weighted_mse(&mut g, pred, &y, &[0.2, 0.3, 0.5], 1).unwrap();
        assert_eq!(g.value(loss).data(), &[0.0]);
    }

    #[test]
    fn uniform_weights_hand_value() {
        let mut g = Graph::new();
        let truth = Tensor::new([2, 1], vec![0.0, 0.0]).unwrap();
        let pred = g.constant(Tensor::new([2, 1], vec![1.0, 2.0]).unwrap());
        let w = TrainConfig::default().resolved_weights(2).unwrap();
        let loss = weighted_mse(&mut g, pred, &truth, &w, 1).unwrap();
        assert_eq!(g.value(loss).data(), &[2.5]);
    }

    #[test]
    fn first_step_weight_blocks_later_gradients() {
        let mut g = Graph::new();
        let truth = Tensor::from_fn([4, 2], |i| i as f64 * 0.1);
        let pred = g.param(Tensor::from_fn([4, 2], |i| 0.9 - i as f64 * 0.07));
        let w = normalize_weights(&[1.0, 0.0, 0.0, 0.0]);
        let loss = weighted_mse(&mut g, pred, &truth, &w, 3).unwrap();
        let grads = g.backward(loss).unwrap();
        let d = grads.get(pred).unwrap();
        assert!(d[..2].iter().all(|&v| v != 0.0));
        assert!(d[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_scaling_is_invisible() {
        let a = TrainConfig {
            weights: vec![1.0, 2.0, 5.0],
            ..TrainConfig::default()
        };
        let b = TrainConfig {
            weights: vec![10.0, 20.0, 50.0],
            ..TrainConfig::default()
        };
        let truth = Tensor::from_fn([3, 2], |i| i as f64 * 0.1);
        let value = |cfg: &TrainConfig| {
            let mut g = Graph::new();
            let pred = g.constant(Tensor::full([3, 2], 0.4));
            let loss = weighted_mse(&mut g, pred, &truth, &cfg.resolved_weights(3).unwrap(), 2).unwrap();
            g.value(loss).data()[0]
        };
        assert!(relative_error(&[value(&a)], &[value(&b)]) < 1e-15);
    }

    #[test]
    fn weight_violations_listed() {
        let cfg = TrainConfig {
            weights: vec![0.0, 0.0],
            batch_size: 0,
            ..TrainConfig::default()
        };
        let v = cfg.violations(3);
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn front_loaded_shares() {
        let w = front_loaded_weights(5, 0.8);
        assert_eq!(w[0], 0.8);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[1], w[4]);
    }

    fn tiny() -> (Dsan, Vec<Sample>) {
        use rand::Rng;
        use std::sync::Arc;
        let cfg = ModelConfig {
            layers: 1,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            proj_layers: 1,
            local_radius: 1,
            dropout: 0.1,
            weeks: 0,
            days: 0,
            recent: 2,
            horizon: 2,
            rows: 3,
            cols: 3,
            features: 1,
            steps_per_day: 4,
            ..ModelConfig::default()
        };
        let model = Dsan::new(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cal = Arc::new(Tensor::from_fn([2, cfg.external_dim()], |i| (i % 3 == 0) as u8 as f64));
        let samples = (0..6)
            .map(|t1| {
                let x = Tensor::from_fn([2, 9, 1], |_| rng.random_range(0.0..1.0));
                let target = crate::encodings::GridCoord::new(1, 1);
                Sample {
                    t1,
                    target,
                    x_local: crate::model::extract_local_block(&x, 3, 3, target, 1).unwrap(),
                    x: Arc::new(x),
                    history_calendar: Arc::clone(&cal),
                    future_calendar: Arc::clone(&cal),
                    y: Tensor::from_fn([2, 1], |_| rng.random_range(0.1..0.9)),
                }
            })
            .collect();
        (model, samples)
    }

    #[test]
    fn zero_epochs_keeps_parameters() {
        let (mut model, samples) = tiny();
        let before = model.params().clone();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &samples, &[], &cfg, |_| {}).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn same_seed_same_history() {
        let run = || {
            let (mut model, samples) = tiny();
            let cfg = TrainConfig {
                max_epochs: 4,
                batch_size: 2,
                warmup: 10,
                ..TrainConfig::default()
            };
            let out = train(&mut model, &samples[..4], &samples[4..], &cfg, |_| {}).unwrap();
            let mut csv = Vec::new();
            write_history(&mut csv, &out.history).unwrap();
            (csv, model.params().clone())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);
    }

    #[test]
    fn keeps_best_validation_epoch() {
        let (mut model, samples) = tiny();
        let cfg = TrainConfig {
            max_epochs: 8,
            batch_size: 2,
            warmup: 5,
            patience: 2,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &samples[..4], &samples[4..], &cfg, |_| {}).unwrap();
        let best = out.best_epoch.unwrap();
        let min = out
            .history
            .iter()
            .map(|r| r.val_loss.unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.history[best - 1].val_loss, Some(min));
        let w = cfg.resolved_weights(2).unwrap();
        assert_eq!(mean_loss(&model, &samples[4..], &w).unwrap(), Some(min));
    }

    #[test]
    fn validation_split_keeps_first_steps_together() {
        let (_, samples) = tiny();
        let mut doubled = Vec::new();
        for s in samples {
            doubled.push(s.clone());
            doubled.push(s);
        }
        let (train, val) = split_validation(doubled, 0.34);
        assert_eq!(val.len(), 4);
        assert!(train.iter().all(|s| s.t1 < 4) && val.iter().all(|s| s.t1 >= 4));
    }
}
