use std::io::{self, Write};

use thiserror::Error;

use super::metrics::{fmt_opt, MetricAccumulator};
use super::Strategy;
use crate::datapipe::{samples_at, DataError, GridSeries, NormStats, SampleSpec};
use crate::model::Dsan;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Range(String),
}

/// What the multi-step rollout appends after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    Prediction,
    GroundTruth,
}

fn check_start(model: &Dsan, series: &GridSeries, t1: usize, steps: usize) -> Result<(), RolloutError> {
    let c = model.config();
    if (c.rows, c.cols, c.features) != (series.rows, series.cols, series.features) {
        return Err(RolloutError::Range(format!(
            "model expects a {}x{} map with {} features, series has {}x{} with {}",
            c.rows, c.cols, c.features, series.rows, series.cols, series.features
        )));
    }
    if steps == 0 || t1 > series.steps() {
        return Err(RolloutError::Range(format!(
            "cannot roll out {steps} steps from step {t1} of {}",
            series.steps()
        )));
    }
    Ok(())
}

/// Predicts the whole map one step at a time from `t1`. After each step the
/// denormalized frame is appended to the history and renormalized. With
/// [`Feedback::GroundTruth`] the true frame is appended instead.
/// `raw` is in original units; returns `steps × N × b` in original units.
pub fn rollout_multi_step(
    model: &Dsan,
    raw: &GridSeries,
    stats: &NormStats,
    t1: usize,
    steps: usize,
    feedback: Feedback,
) -> Result<Tensor, RolloutError> {
    check_start(model, raw, t1, steps)?;
    if feedback == Feedback::GroundTruth && t1 + steps - 1 > raw.steps() {
        return Err(RolloutError::Range("ground-truth feedback runs past the series".into()));
    }
    let spec = SampleSpec {
        horizon: 1,
        ..SampleSpec::from(model.config())
    };
    let normalized = stats.normalized(raw);
    let mut working = normalized.truncated(t1);
    let frame_len = raw.frame_len();
    let mut out = Vec::with_capacity(steps * frame_len);
    for s in 0..steps {
        let t = t1 + s;
        let mut frame = Vec::with_capacity(frame_len);
        for sample in samples_at(&working, &spec, t)? {
            frame.extend_from_slice(model.autoregressive_predict(&sample, 1)?.data());
        }
        stats.invert_slice(&mut frame);
        out.extend_from_slice(&frame);
        if s + 1 == steps {
            break;
        }
        let ext = if t < raw.steps() {
            raw.externals_at(t).to_vec()
        } else {
            vec![0.0; raw.externals]
        };
        match feedback {
            Feedback::Prediction => {
                stats.apply_slice(&mut frame);
                working.push_frame(&frame, &ext);
            }
            Feedback::GroundTruth => working.push_frame(normalized.frame(t), &ext),
        }
    }
    Ok(Tensor::new([steps, raw.grids(), raw.features], out)?)
}

/// One autoregressive pass of `steps` per grid, all from history before `t1`.
/// Returns `steps × N × b` in original units.
pub fn rollout_consecutive(
    model: &Dsan,
    raw: &GridSeries,
    stats: &NormStats,
    t1: usize,
    steps: usize,
) -> Result<Tensor, RolloutError> {
    check_start(model, raw, t1, steps)?;
    let spec = SampleSpec {
        horizon: steps,
        ..SampleSpec::from(model.config())
    };
    let working = stats.normalized(&raw.truncated(t1));
    let (n, b) = (raw.grids(), raw.features);
    let mut out = vec![0.0; steps * n * b];
    for (grid, sample) in samples_at(&working, &spec, t1)?.iter().enumerate() {
        let mut pred = model.autoregressive_predict(sample, steps)?.into_data();
        stats.invert_slice(&mut pred);
        for s in 0..steps {
            out[(s * n + grid) * b..(s * n + grid + 1) * b].copy_from_slice(&pred[s * b..(s + 1) * b]);
        }
    }
    Ok(Tensor::new([steps, n, b], out)?)
}

fn truth_block(raw: &GridSeries, t1: usize, steps: usize) -> &[f64] {
    let n = raw.frame_len();
    &raw.data[t1 * n..(t1 + steps) * n]
}

/// Rolls out from every `t1` in `starts` and scores against the raw series.
pub fn evaluate(
    model: &Dsan,
    raw: &GridSeries,
    stats: &NormStats,
    starts: &[usize],
    steps: usize,
    strategy: Strategy,
    thresholds: &[f64],
) -> Result<MetricAccumulator, RolloutError> {
    let mut acc = MetricAccumulator::new(steps, thresholds.to_vec());
    for &t1 in starts {
        if t1 + steps > raw.steps() {
            return Err(RolloutError::Range(format!(
                "{steps} steps from {t1} exceed the {} available",
                raw.steps()
            )));
        }
        let pred = match strategy {
            Strategy::MultiStep => rollout_multi_step(model, raw, stats, t1, steps, Feedback::Prediction)?,
            Strategy::Consecutive => rollout_consecutive(model, raw, stats, t1, steps)?,
        };
        acc.add_block(pred.data(), truth_block(raw, t1, steps), raw.grids());
    }
    Ok(acc)
}

/// Per-step errors of both strategies over the same starts.
#[derive(Debug, Clone)]
pub struct StrategyCurves {
    pub multi_step: MetricAccumulator,
    pub consecutive: MetricAccumulator,
}

pub const CURVE_HEADER: &str = "step,feature,multi_step_rmse,consecutive_rmse,multi_step_mape,consecutive_mape";

impl StrategyCurves {
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{CURVE_HEADER}")?;
        let (m, c) = (&self.multi_step, &self.consecutive);
        for s in 0..m.steps() {
            for k in 0..m.features() {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    s + 1,
                    k,
                    fmt_opt(m.rmse(s, k)),
                    fmt_opt(c.rmse(s, k)),
                    fmt_opt(m.mape(s, k)),
                    fmt_opt(c.mape(s, k))
                )?;
            }
        }
        Ok(())
    }

    /// Steps at which the multi-step RMSE is below the consecutive RMSE, for `feature`.
    pub fn multi_step_wins(&self, feature: usize) -> usize {
        (0..self.multi_step.steps())
            .filter(
                |&s| match (self.multi_step.rmse(s, feature), self.consecutive.rmse(s, feature)) {
                    (Some(a), Some(b)) => a < b,
                    _ => false,
                },
            )
            .count()
    }
}

/// `one_step` drives the multi-step strategy, `long` the consecutive one.
pub fn compare_strategies(
    one_step: &Dsan,
    long: &Dsan,
    raw: &GridSeries,
    stats: &NormStats,
    starts: &[usize],
    steps: usize,
    thresholds: &[f64],
) -> Result<StrategyCurves, RolloutError> {
    Ok(StrategyCurves {
        multi_step: evaluate(one_step, raw, stats, starts, steps, Strategy::MultiStep, thresholds)?,
        consecutive: evaluate(long, raw, stats, starts, steps, Strategy::Consecutive, thresholds)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{synth_generate, SynthSpec};
    use crate::model::ModelConfig;

    fn setup(horizon: usize) -> (Dsan, GridSeries, NormStats) {
        let (raw, _) = synth_generate(&SynthSpec {
            rows: 4,
            cols: 4,
            days: 3,
            steps_per_day: 6,
            bumps: 1,
            sigma: 0.8,
            drift: 0.3,
            noise: 0.2,
            ..SynthSpec::default()
        });
        let cfg = ModelConfig {
            layers: 1,
            d_model: 8,
            d_ff: 8,
            heads: 2,
            proj_layers: 1,
            local_radius: 1,
            dropout: 0.0,
            weeks: 0,
            days: 1,
            recent: 2,
            horizon,
            rows: 4,
            cols: 4,
            features: 2,
            steps_per_day: 6,
            ..ModelConfig::default()
        };
        let stats = NormStats::fit(&raw, 12).unwrap();
        (Dsan::new(cfg, 1).unwrap(), raw, stats)
    }

    #[test]
    fn single_step_strategies_agree() {
        let (model, raw, stats) = setup(1);
        let a = rollout_multi_step(&model, &raw, &stats, 8, 1, Feedback::Prediction).unwrap();
        let b = rollout_consecutive(&model, &raw, &stats, 8, 1).unwrap();
        assert_eq!(a.shape(), &[1, 16, 2]);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn truth_feedback_equals_independent_steps() {
        let (model, raw, stats) = setup(1);
        let roll = rollout_multi_step(&model, &raw, &stats, 8, 4, Feedback::GroundTruth).unwrap();
        for s in 0..4 {
            let one = rollout_consecutive(&model, &raw, &stats, 8 + s, 1).unwrap();
            assert_eq!(&roll.data()[s * 32..(s + 1) * 32], one.data());
        }
    }

    #[test]
    fn consecutive_matches_standalone_predictions() {
        let (model, raw, stats) = setup(3);
        let roll = rollout_consecutive(&model, &raw, &stats, 9, 3).unwrap();
        assert_eq!(roll.shape(), &[3, 16, 2]);
        let spec = SampleSpec::from(model.config());
        let samples = samples_at(&stats.normalized(&raw), &spec, 9).unwrap();
        let grid = 5;
        let mut alone = model.autoregressive_predict(&samples[grid], 3).unwrap().into_data();
        stats.invert_slice(&mut alone);
        for s in 0..3 {
            for k in 0..2 {
                assert_eq!(roll.at(&[s, grid, k]), alone[s * 2 + k]);
            }
        }
    }

    #[test]
    fn curves_csv_is_aligned() {
        let (one, raw, stats) = setup(1);
        let (long, _, _) = setup(3);
        let curves = compare_strategies(&one, &long, &raw, &stats, &[9, 10], 3, &[0.0, 0.0]).unwrap();
        let mut out = Vec::new();
        curves.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CURVE_HEADER);
        assert_eq!(lines.len(), 1 + 3 * 2);
        for l in &lines[1..] {
            let cells: Vec<&str> = l.split(',').collect();
            assert_eq!(cells.len(), 6);
            assert!(cells[2..].iter().all(|c| c.parse::<f64>().is_ok()));
        }
    }

    #[test]
    fn evaluation_past_end_is_rejected() {
        let (model, raw, stats) = setup(2);
        let last = raw.steps() - 1;
        assert!(matches!(
            evaluate(&model, &raw, &stats, &[last], 2, Strategy::Consecutive, &[0.0, 0.0]),
            Err(RolloutError::Range(_))
        ));
    }
}
