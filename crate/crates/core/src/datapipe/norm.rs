use serde::{Deserialize, Serialize};

use super::{DataError, GridSeries};

/// Per-feature min and max fitted on a training span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    /// Fits on steps `0..steps` of `series`.
    pub fn fit(series: &GridSeries, steps: usize) -> Result<Self, DataError> {
        let b = series.features;
        if steps == 0 || steps > series.steps() {
            return Err(DataError::Format(format!(
                "cannot fit normalization on {steps} of {} steps",
                series.steps()
            )));
        }
        let mut min = vec![f64::INFINITY; b];
        let mut max = vec![f64::NEG_INFINITY; b];
        for (i, &v) in series.data[..steps * series.frame_len()].iter().enumerate() {
            let k = i % b;
            min[k] = min[k].min(v);
            max[k] = max[k].max(v);
        }
        Ok(Self { min, max })
    }

    pub fn features(&self) -> usize {
        self.min.len()
    }

    /// Maps feature `k` into `[0, 1]`, clamping values outside the fitted range.
    /// A constant feature maps to 0.
    pub fn apply(&self, k: usize, v: f64) -> f64 {
        let span = self.max[k] - self.min[k];
        if span <= 0.0 {
            return 0.0;
        }
        ((v - self.min[k]) / span).clamp(0.0, 1.0)
    }

    pub fn invert(&self, k: usize, v: f64) -> f64 {
        self.min[k] + v * (self.max[k] - self.min[k])
    }

    /// Applies to a flat slice whose last axis is the feature axis.
    pub fn apply_slice(&self, values: &mut [f64]) {
        let b = self.features();
        for (i, v) in values.iter_mut().enumerate() {
            *v = self.apply(i % b, *v);
        }
    }

    pub fn invert_slice(&self, values: &mut [f64]) {
        let b = self.features();
        for (i, v) in values.iter_mut().enumerate() {
            *v = self.invert(i % b, *v);
        }
    }

    pub fn normalized(&self, series: &GridSeries) -> GridSeries {
        assert_eq!(series.features, self.features(), "feature count");
        let mut out = series.clone();
        self.apply_slice(&mut out.data);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::default_origin;
    use proptest::prelude::*;

    fn series(values: &[f64], features: usize) -> GridSeries {
        let mut s = GridSeries::zeros(0, 1, 1, features, 0, 30, default_origin(), 1.0);
        s.data = values.to_vec();
        s.external_data.clear();
        s
    }

    #[test]
    fn bounds_map_to_unit_interval() {
        let s = series(&[2.0, 5.0, 10.0, 5.0, 6.0, 5.0], 2);
        let n = NormStats::fit(&s, 3).unwrap();
        assert_eq!(n.min, vec![2.0, 5.0]);
        assert_eq!(n.apply(0, 2.0), 0.0);
        assert_eq!(n.apply(0, 10.0), 1.0);
        assert_eq!(n.apply(0, 11.0), 1.0);
        assert_eq!(n.apply(0, -1.0), 0.0);
        assert_eq!(n.apply(1, 5.0), 0.0);
        assert_eq!(n.apply(1, 9.0), 0.0);
    }

    #[test]
    fn fit_uses_training_span_only() {
        let s = series(&[1.0, 3.0, 100.0], 1);
        let n = NormStats::fit(&s, 2).unwrap();
        assert_eq!(n.max, vec![3.0]);
        assert!(NormStats::fit(&s, 0).is_err());
        assert!(NormStats::fit(&s, 4).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_in_range(lo in -1e3f64..1e3, span in 1e-3f64..1e4, u in 0.0f64..1.0) {
            let s = series(&[lo, lo + span], 1);
            let n = NormStats::fit(&s, 2).unwrap();
            let x = lo + u * span;
            prop_assert!((n.invert(0, n.apply(0, x)) - x).abs() < 1e-9);
        }
    }
}
