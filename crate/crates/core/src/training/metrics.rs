use std::io::{self, Write};

/// Running RMSE/MAPE per `(step, feature)` over instances whose ground truth
/// reaches that feature's threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    steps: usize,
    features: usize,
    thresholds: Vec<f64>,
    sq_err: Vec<f64>,
    abs_pct: Vec<f64>,
    count: Vec<usize>,
    pct_count: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(steps: usize, thresholds: Vec<f64>) -> Self {
        let features = thresholds.len();
        let n = steps * features;
        Self {
            steps,
            features,
            thresholds,
            sq_err: vec![0.0; n],
            abs_pct: vec![0.0; n],
            count: vec![0; n],
            pct_count: vec![0; n],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// Adds one denormalized prediction. Truth below the threshold is ignored;
    /// a zero truth is kept for RMSE but cannot enter MAPE.
    pub fn add(&mut self, step: usize, feature: usize, pred: f64, truth: f64) {
        if truth < self.thresholds[feature] {
            return;
        }
        let i = step * self.features + feature;
        let e = pred - truth;
        self.sq_err[i] += e * e;
        self.count[i] += 1;
        if truth != 0.0 {
            self.abs_pct[i] += (e / truth).abs();
            self.pct_count[i] += 1;
        }
    }

    /// Adds `steps × N × b` predictions against matching truth.
    pub fn add_block(&mut self, pred: &[f64], truth: &[f64], grids: usize) {
        assert_eq!(pred.len(), truth.len());
        let b = self.features;
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            self.add(i / (grids * b), i % b, p, t);
        }
    }

    pub fn count(&self, step: usize, feature: usize) -> usize {
        self.count[step * self.features + feature]
    }

    /// `None` when no instance passed the threshold.
    pub fn rmse(&self, step: usize, feature: usize) -> Option<f64> {
        let i = step * self.features + feature;
        (self.count[i] > 0).then(|| (self.sq_err[i] / self.count[i] as f64).sqrt())
    }

    /// Mean absolute percentage error as a fraction; `None` when undefined.
    pub fn mape(&self, step: usize, feature: usize) -> Option<f64> {
        let i = step * self.features + feature;
        (self.pct_count[i] > 0).then(|| self.abs_pct[i] / self.pct_count[i] as f64)
    }

    /// Pools all steps for one feature.
    pub fn overall_rmse(&self, feature: usize) -> Option<f64> {
        let (sq, n) = (0..self.steps).fold((0.0, 0), |(sq, n), s| {
            let i = s * self.features + feature;
            (sq + self.sq_err[i], n + self.count[i])
        });
        (n > 0).then(|| (sq / n as f64).sqrt())
    }

    /// Delimited table `step,feature,count,rmse,mape`; undefined cells are empty.
    pub fn write_table(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "step,feature,count,rmse,mape")?;
        for s in 0..self.steps {
            for k in 0..self.features {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    s + 1,
                    k,
                    self.count(s, k),
                    fmt_opt(self.rmse(s, k)),
                    fmt_opt(self.mape(s, k))
                )?;
            }
        }
        Ok(())
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn below_threshold_is_undefined() {
        let mut m = MetricAccumulator::new(1, vec![10.0]);
        m.add(0, 0, 5.0, 9.9);
        assert_eq!(m.rmse(0, 0), None);
        assert_eq!(m.mape(0, 0), None);
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let mut m = MetricAccumulator::new(2, vec![0.0, 0.0]);
        for s in 0..2 {
            m.add(s, 0, 12.0, 12.0);
            m.add(s, 1, 3.0, 3.0);
        }
        assert_eq!(m.rmse(1, 1), Some(0.0));
        assert_eq!(m.mape(0, 0), Some(0.0));
    }

    #[test]
    fn matches_instance_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let thresholds = vec![10.0, 5.0];
        let inst: Vec<(usize, usize, f64, f64)> = (0..1000)
            .map(|_| {
                (
                    rng.random_range(0..3),
                    rng.random_range(0..2),
                    rng.random_range(0.0..40.0),
                    rng.random_range(0.0..40.0),
                )
            })
            .collect();
        let mut m = MetricAccumulator::new(3, thresholds.clone());
        for &(s, k, p, t) in &inst {
            m.add(s, k, p, t);
        }
        for s in 0..3 {
            for (k, &threshold) in thresholds.iter().enumerate() {
                let kept: Vec<_> = inst
                    .iter()
                    .filter(|i| i.0 == s && i.1 == k && i.3 >= threshold)
                    .collect();
                let mut sq = 0.0;
                let mut pct = 0.0;
                for i in &kept {
                    sq += (i.2 - i.3) * (i.2 - i.3);
                    pct += ((i.2 - i.3) / i.3).abs();
                }
                let n = kept.len() as f64;
                assert_eq!(m.rmse(s, k), Some((sq / n).sqrt()));
                assert_eq!(m.mape(s, k), Some(pct / n));
            }
        }
    }

    #[test]
    fn table_has_one_row_per_cell() {
        let mut m = MetricAccumulator::new(2, vec![0.0]);
        m.add(0, 0, 1.0, 2.0);
        let mut out = Vec::new();
        m.write_table(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "step,feature,count,rmse,mape\n1,0,1,1,0.5\n2,0,0,,\n");
    }
}
