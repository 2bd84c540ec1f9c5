use std::ops::Range;
use std::sync::Arc;

use serde::Serialize;

use super::{DataError, GridSeries};
use crate::encodings::{stack_external, GridCoord};
use crate::model::{extract_local_block, ModelConfig, Sample};
use crate::tensor::Tensor;

/// Which historical steps feed a sample and how far ahead it predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSpec {
    pub weeks: usize,
    pub days: usize,
    pub recent: usize,
    pub horizon: usize,
    pub local_radius: usize,
}

impl From<&ModelConfig> for SampleSpec {
    fn from(c: &ModelConfig) -> Self {
        Self {
            weeks: c.weeks,
            days: c.days,
            recent: c.recent,
            horizon: c.horizon,
            local_radius: c.local_radius,
        }
    }
}

/// First-step candidates that were skipped, per reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SkipCounts {
    pub history: usize,
    pub future: usize,
}

/// How many steps before `t1` each historical slice lies, in chronological
/// order: previous weeks, then previous days, then the latest steps.
pub fn history_offsets(spec: &SampleSpec, steps_per_day: usize) -> Vec<usize> {
    let week = 7 * steps_per_day;
    let mut out: Vec<usize> = (1..=spec.weeks).rev().map(|w| w * week).collect();
    out.extend((1..=spec.days).rev().map(|k| k * steps_per_day));
    out.extend((1..=spec.recent).rev());
    out
}

/// One sample per `(t1, grid)` for every `t1` in `t1s` with enough history and
/// future, ordered by `t1` then grid index. `series` should already be normalized.
pub fn build_samples(
    series: &GridSeries,
    spec: &SampleSpec,
    t1s: Range<usize>,
) -> Result<(Vec<Sample>, SkipCounts), DataError> {
    let a = series.steps_per_day()?;
    let offsets = history_offsets(spec, a);
    let reach = offsets.iter().copied().max().unwrap_or(0);
    let mut skipped = SkipCounts::default();
    let mut out = Vec::new();
    for t1 in t1s {
        if t1 < reach || t1 == 0 {
            skipped.history += 1;
            continue;
        }
        if t1 + spec.horizon > series.steps() {
            skipped.future += 1;
            continue;
        }
        out.extend(samples_at(series, spec, t1)?);
    }
    Ok((out, skipped))
}

/// Samples for every grid at first future step `t1`, needing only history.
/// Targets past the end of `series` are left at zero.
pub fn samples_at(series: &GridSeries, spec: &SampleSpec, t1: usize) -> Result<Vec<Sample>, DataError> {
    let a = series.steps_per_day()?;
    let offsets = history_offsets(spec, a);
    let (n, b) = (series.grids(), series.features);
    let steps: Vec<usize> = offsets
        .iter()
        .map(|&o| t1.checked_sub(o).filter(|&t| t < series.steps()))
        .collect::<Option<_>>()
        .ok_or_else(|| DataError::Format(format!("step {t1} lacks the history its samples need")))?;
    let mut x = Vec::with_capacity(steps.len() * n * b);
    for &t in &steps {
        x.extend_from_slice(series.frame(t));
    }
    let x = Arc::new(Tensor::new([steps.len(), n, b], x).expect("history shape"));
    let history = steps
        .iter()
        .map(|&t| series.external_vector(t, true))
        .collect::<Result<Vec<_>, _>>()?;
    let future = (0..spec.horizon)
        .map(|i| series.external_vector(t1 + i, false))
        .collect::<Result<Vec<_>, _>>()?;
    let history = Arc::new(stack_external(&history)?);
    let future = Arc::new(stack_external(&future)?);
    let mut out = Vec::with_capacity(n);
    for grid in 0..n {
        let target = GridCoord::new(grid / series.cols, grid % series.cols);
        let x_local =
            extract_local_block(&x, series.rows, series.cols, target, spec.local_radius).expect("target inside map");
        let y = Tensor::from_fn([spec.horizon, b], |i| {
            let t = t1 + i / b;
            if t < series.steps() {
                series.at(t, grid, i % b)
            } else {
                0.0
            }
        });
        out.push(Sample {
            t1,
            target,
            x: Arc::clone(&x),
            x_local,
            history_calendar: Arc::clone(&history),
            future_calendar: Arc::clone(&future),
            y,
        });
    }
    Ok(out)
}

/// Re-derives every index a sample references straight from the series and
/// counts mismatches or out-of-range references.
pub fn validate_indices(samples: &[Sample], series: &GridSeries, spec: &SampleSpec) -> usize {
    let a = series.steps_per_day().expect("valid interval");
    let offsets = history_offsets(spec, a);
    let (rows, cols, b) = (series.rows as i64, series.cols as i64, series.features);
    let mut violations = 0;
    for s in samples {
        let grid = s.target.row * series.cols + s.target.col;
        if s.target.row as i64 >= rows || s.target.col as i64 >= cols {
            violations += 1;
            continue;
        }
        for (slot, &off) in offsets.iter().enumerate() {
            let Some(t) = s.t1.checked_sub(off) else {
                violations += 1;
                continue;
            };
            for g in 0..series.grids() {
                for k in 0..b {
                    if s.x.at(&[slot, g, k]) != series.at(t, g, k) {
                        violations += 1;
                    }
                }
            }
            let side = 2 * spec.local_radius as i64 + 1;
            for dr in 0..side {
                for dc in 0..side {
                    let r = s.target.row as i64 + dr - spec.local_radius as i64;
                    let c = s.target.col as i64 + dc - spec.local_radius as i64;
                    let inside = (0..rows).contains(&r) && (0..cols).contains(&c);
                    for k in 0..b {
                        let expect = if inside {
                            series.at(t, (r * cols + c) as usize, k)
                        } else {
                            0.0
                        };
                        if s.x_local.at(&[slot, (dr * side + dc) as usize, k]) != expect {
                            violations += 1;
                        }
                    }
                }
            }
        }
        for i in 0..spec.horizon {
            let t = s.t1 + i;
            if t >= series.steps() {
                violations += 1;
                continue;
            }
            for k in 0..b {
                if s.y.at(&[i, k]) != series.at(t, grid, k) {
                    violations += 1;
                }
            }
        }
    }
    violations
}
