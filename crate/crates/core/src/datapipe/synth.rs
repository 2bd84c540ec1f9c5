//! Synthetic series: Gaussian bumps whose mass and position follow a daily
//! cycle, sampled at cell centres, plus optional non-negative noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{default_origin, GridSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub days: usize,
    pub steps_per_day: usize,
    pub features: usize,
    pub bumps: usize,
    /// Peak total mass of one bump.
    pub amplitude: f64,
    /// Bump width in cells.
    pub sigma: f64,
    /// Radius of the daily circular drift of each bump centre, in cells.
    pub drift: f64,
    /// Standard deviation of the folded-normal noise added to every entry.
    pub noise: f64,
    /// Constant added to every entry.
    pub floor: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rows: 10,
            cols: 10,
            days: 14,
            steps_per_day: 48,
            features: 2,
            bumps: 3,
            amplitude: 100.0,
            sigma: 1.0,
            drift: 1.0,
            noise: 0.0,
            floor: 0.0,
        }
    }
}

/// Parameters drawn for one bump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub row: f64,
    pub col: f64,
    pub scale: f64,
    pub phase: f64,
}

impl SynthSpec {
    pub fn interval_minutes(&self) -> u32 {
        (1440 / self.steps_per_day.max(1)) as u32
    }

    pub fn draw_bumps(&self, rng: &mut ChaCha8Rng) -> Vec<Bump> {
        let margin = |n: usize| (2.0 * self.sigma + self.drift).min((n as f64 - 1.0) / 2.0);
        let (mr, mc) = (margin(self.rows), margin(self.cols));
        (0..self.bumps)
            .map(|_| Bump {
                row: rng.random_range(mr..=(self.rows as f64 - 1.0 - mr)),
                col: rng.random_range(mc..=(self.cols as f64 - 1.0 - mc)),
                scale: rng.random_range(0.5..=1.0),
                phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect()
    }

    /// Cycle angle of step `t`, with a per-feature shift.
    fn angle(&self, t: usize, feature: usize, phase: f64) -> f64 {
        let s = (t % self.steps_per_day) as f64 / self.steps_per_day as f64;
        2.0 * PI * s + phase + feature as f64 * PI / 3.0
    }

    /// Total mass of bump `b` for `feature` at step `t`.
    pub fn bump_mass(&self, b: &Bump, t: usize, feature: usize) -> f64 {
        self.amplitude * b.scale * (0.6 + 0.4 * self.angle(t, feature, b.phase).sin())
    }

    /// Centre of bump `b` at step `t`.
    pub fn bump_center(&self, b: &Bump, t: usize) -> (f64, f64) {
        let a = self.angle(t, 0, b.phase);
        (b.row + self.drift * a.cos(), b.col + self.drift * a.sin())
    }
}

/// Deterministic series for `spec`; returns the drawn bumps alongside.
pub fn synth_generate(spec: &SynthSpec) -> (GridSeries, Vec<Bump>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bumps = spec.draw_bumps(&mut rng);
    let steps = spec.days * spec.steps_per_day;
    let mut series = GridSeries::zeros(
        steps,
        spec.rows,
        spec.cols,
        spec.features,
        0,
        spec.interval_minutes(),
        default_origin(),
        1000.0,
    );
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("finite noise"));
    let two_var = 2.0 * spec.sigma * spec.sigma;
    for t in 0..steps {
        for grid in 0..series.grids() {
            let (r, c) = ((grid / spec.cols) as f64, (grid % spec.cols) as f64);
            for k in 0..spec.features {
                let mut v = spec.floor;
                for b in &bumps {
                    let (br, bc) = spec.bump_center(b, t);
                    let d2 = (r - br).powi(2) + (c - bc).powi(2);
                    v += spec.bump_mass(b, t, k) * (-d2 / two_var).exp() / (PI * two_var);
                }
                if let Some(n) = &noise {
                    v += n.sample(&mut rng).abs();
                }
                let i = series.index(t, grid, k);
                series.data[i] = v;
            }
        }
    }
    (series, bumps)
}
