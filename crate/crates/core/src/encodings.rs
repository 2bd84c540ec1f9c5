//! Spatial and temporal positional encodings.
//!
//! The spatial part is a fixed sinusoid of grid coordinates; even dimensions
//! read the row coordinate and odd dimensions read the column coordinate. The
//! temporal part is a small learned network over calendar one-hots and
//! external features. Their broadcast sum tags every `(time, grid)` input.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::Linear;
use crate::tensor::{Bound, Graph, ParamStore, Result as TensorResult, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("model dimension {0} must be even for the spatial encoding")]
    OddDimension(usize),
    #[error("step of day {step} out of range for {steps_per_day} steps per day")]
    StepOutOfRange { step: usize, steps_per_day: usize },
    #[error("day of week {0} out of range")]
    DayOutOfRange(usize),
    #[error("interval of {interval} minutes does not divide a day")]
    BadInterval { interval: u32 },
    #[error("external vector length {actual}, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
}

/// How grid coordinates are expressed before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordScheme {
    /// Original `(row, col)` positions.
    Absolute,
    /// Signed offsets from the target grid; the target itself is `(0, 0)`.
    #[default]
    Relative,
}

/// `(row, col)` of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub row: usize,
    pub col: usize,
}

impl GridCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Coordinates of every position in an encoded input, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scheme: CoordScheme,
    pub center: GridCoord,
    pub coords: Vec<(i64, i64)>,
}

impl CoordinateMatrix {
    fn build(rows: usize, cols: usize, origin: (i64, i64), center: GridCoord, scheme: CoordScheme) -> Self {
        let shift = match scheme {
            CoordScheme::Absolute => (0, 0),
            CoordScheme::Relative => (center.row as i64, center.col as i64),
        };
        let coords = (0..rows as i64)
            .flat_map(|r| (0..cols as i64).map(move |c| (r, c)))
            .map(|(r, c)| (origin.0 + r - shift.0, origin.1 + c - shift.1))
            .collect();
        Self {
            rows,
            cols,
            scheme,
            center,
            coords,
        }
    }

    /// The full `I × J` map, as seen from target `center`.
    pub fn grid(rows: usize, cols: usize, center: GridCoord, scheme: CoordScheme) -> Self {
        Self::build(rows, cols, (0, 0), center, scheme)
    }

    /// The `(2r+1) × (2r+1)` block centred on `center`. Cells may fall outside the map.
    pub fn block(center: GridCoord, radius: usize, scheme: CoordScheme) -> Self {
        let side = 2 * radius + 1;
        let origin = (center.row as i64 - radius as i64, center.col as i64 - radius as i64);
        Self::build(side, side, origin, center, scheme)
    }

    /// The single target cell.
    pub fn point(center: GridCoord, scheme: CoordScheme) -> Self {
        Self::build(1, 1, (center.row as i64, center.col as i64), center, scheme)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// One dimension of the spatial encoding at coordinate `(r, c)`.
pub fn spe_component(r: i64, c: i64, l: usize, d: usize) -> f64 {
    let denom = 10000f64.powf(2.0 * l as f64 / d as f64);
    if l.is_multiple_of(2) {
        (r as f64 / denom).sin()
    } else {
        (c as f64 / denom).cos()
    }
}

/// Spatial encoding table of shape `1 × N × d`.
pub fn spatial_encoding(coords: &CoordinateMatrix, d: usize) -> Result<Tensor, EncodingError> {
    if !d.is_multiple_of(2) {
        return Err(EncodingError::OddDimension(d));
    }
    let mut data = Vec::with_capacity(coords.len() * d);
    for &(r, c) in &coords.coords {
        data.extend((0..d).map(|l| spe_component(r, c, l, d)));
    }
    Ok(Tensor::new([1, coords.len(), d], data).expect("spe shape"))
}

/// Calendar one-hots followed by external features: length `7 + a + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalVector {
    values: Vec<f64>,
    steps_per_day: usize,
}

impl ExternalVector {
    /// `day_of_week` counts from Monday = 0.
    pub fn new(
        day_of_week: usize,
        step_of_day: usize,
        steps_per_day: usize,
        externals: &[f64],
    ) -> Result<Self, EncodingError> {
        if day_of_week >= 7 {
            return Err(EncodingError::DayOutOfRange(day_of_week));
        }
        if step_of_day >= steps_per_day {
            return Err(EncodingError::StepOutOfRange {
                step: step_of_day,
                steps_per_day,
            });
        }
        let mut values = vec![0.0; 7 + steps_per_day + externals.len()];
        values[day_of_week] = 1.0;
        values[7 + step_of_day] = 1.0;
        values[7 + steps_per_day..].copy_from_slice(externals);
        Ok(Self { values, steps_per_day })
    }

    /// Calendar slots derived from a wall-clock timestamp and the bin width.
    pub fn from_timestamp(ts: NaiveDateTime, interval_minutes: u32, externals: &[f64]) -> Result<Self, EncodingError> {
        let steps_per_day = steps_per_day(interval_minutes)?;
        let minutes = ts.hour() * 60 + ts.minute();
        let step = (minutes / interval_minutes) as usize;
        let dow = ts.weekday().num_days_from_monday() as usize;
        Self::new(dow, step, steps_per_day, externals)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn day_of_week(&self) -> usize {
        self.values[..7].iter().position(|&v| v == 1.0).expect("one-hot")
    }

    pub fn step_of_day(&self) -> usize {
        self.values[7..7 + self.steps_per_day]
            .iter()
            .position(|&v| v == 1.0)
            .expect("one-hot")
    }

    pub fn externals(&self) -> &[f64] {
        &self.values[7 + self.steps_per_day..]
    }
}

pub fn steps_per_day(interval_minutes: u32) -> Result<usize, EncodingError> {
    if interval_minutes == 0 || 1440 % interval_minutes != 0 {
        return Err(EncodingError::BadInterval {
            interval: interval_minutes,
        });
    }
    Ok((1440 / interval_minutes) as usize)
}

/// Stacks vectors into an `h × (7 + a + c)` tensor.
pub fn stack_external(vectors: &[ExternalVector]) -> Result<Tensor, EncodingError> {
    let width = vectors.first().map_or(0, ExternalVector::len);
    let mut data = Vec::with_capacity(vectors.len() * width);
    for v in vectors {
        if v.len() != width {
            return Err(EncodingError::LengthMismatch {
                expected: width,
                actual: v.len(),
            });
        }
        data.extend_from_slice(v.as_slice());
    }
    Ok(Tensor::new([vectors.len(), width], data).expect("stack shape"))
}

/// Learned temporal encoding `σ(ReLU(r·W₁ + b₁)·W₂ + b₂)`.
#[derive(Debug, Clone, Copy)]
pub struct TemporalEncoder {
    pub first: Linear,
    pub second: Linear,
    pub input_dim: usize,
    pub d: usize,
}

impl TemporalEncoder {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.1"), input_dim, d, true, rng),
            second: Linear::new(store, &format!("{name}.2"), d, d, true, rng),
            input_dim,
            d,
        }
    }

    pub fn num_params(input_dim: usize, d: usize) -> usize {
        Linear::num_params(input_dim, d, true) + Linear::num_params(d, d, true)
    }

    /// Maps `h × (7+a+c)` external vectors to an `h × 1 × d` encoding.
    pub fn forward(&self, g: &mut Graph, p: &Bound, r: Var) -> TensorResult<Var> {
        let shape = g.shape(r).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "temporal_encoding",
                lhs: shape,
                rhs: vec![self.input_dim],
            });
        }
        let h = self.first.forward(g, p, r)?;
        let h = g.relu(h);
        let h = self.second.forward(g, p, h)?;
        let h = g.sigmoid(h);
        g.reshape(h, [shape[0], 1, self.d])
    }
}

/// Broadcast sum of a `1 × N × d` spatial and an `h × 1 × d` temporal encoding.
pub fn stpe(g: &mut Graph, spe: Var, tpe: Var) -> TensorResult<Var> {
    g.add(spe, tpe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn origin_encodes_to_zero_one_pattern() {
        let coords = CoordinateMatrix::point(GridCoord::new(0, 0), CoordScheme::Absolute);
        let spe = spatial_encoding(&coords, 16).unwrap();
        for (l, v) in spe.data().iter().enumerate() {
            let expect = if l % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn first_dimension_reads_row() {
        assert!((spe_component(1, 0, 0, 64) - 0.841471).abs() < 1e-6);
        assert_eq!(spe_component(1, 0, 0, 64), 1f64.sin());
    }

    #[test]
    fn relative_target_is_origin() {
        for center in [GridCoord::new(0, 0), GridCoord::new(3, 7), GridCoord::new(9, 1)] {
            let grid = CoordinateMatrix::grid(10, 8, center, CoordScheme::Relative);
            let idx = center.row * 8 + center.col;
            assert_eq!(grid.coords[idx], (0, 0));
            let point = CoordinateMatrix::point(center, CoordScheme::Relative);
            assert_eq!(point.coords, vec![(0, 0)]);
        }
    }

    #[test]
    fn absolute_entries_are_positions() {
        let grid = CoordinateMatrix::grid(3, 4, GridCoord::new(1, 1), CoordScheme::Absolute);
        assert_eq!(grid.coords[2 * 4 + 3], (2, 3));
        let block = CoordinateMatrix::block(GridCoord::new(0, 0), 1, CoordScheme::Absolute);
        assert_eq!(block.coords[0], (-1, -1));
        assert_eq!(block.coords[4], (0, 0));
    }

    #[test]
    fn odd_dimension_rejected() {
        let coords = CoordinateMatrix::point(GridCoord::new(0, 0), CoordScheme::Relative);
        assert_eq!(spatial_encoding(&coords, 7), Err(EncodingError::OddDimension(7)));
    }

    #[test]
    fn relative_local_block_is_translation_invariant() {
        let a = CoordinateMatrix::block(GridCoord::new(2, 2), 3, CoordScheme::Relative);
        let b = CoordinateMatrix::block(GridCoord::new(11, 5), 3, CoordScheme::Relative);
        assert!(spatial_encoding(&a, 8)
            .unwrap()
            .bit_eq(&spatial_encoding(&b, 8).unwrap()));
    }

    #[test]
    fn external_vector_slots() {
        let v = ExternalVector::new(0, 0, 48, &[]).unwrap();
        assert_eq!(v.len(), 55);
        assert_eq!(v.as_slice()[0], 1.0);
        assert_eq!(v.as_slice()[7], 1.0);
        assert_eq!(v.as_slice().iter().sum::<f64>(), 2.0);

        let v = ExternalVector::new(3, 47, 48, &[0.5, 1.0]).unwrap();
        assert_eq!(v.as_slice()[7 + 47], 1.0);
        assert_eq!(v.externals(), &[0.5, 1.0]);
        assert_eq!(v.len(), 7 + 48 + 2);

        assert_eq!(
            ExternalVector::new(0, 48, 48, &[]),
            Err(EncodingError::StepOutOfRange {
                step: 48,
                steps_per_day: 48
            })
        );
    }

    #[test]
    fn monday_midnight_from_timestamp() {
        let ts = NaiveDateTime::parse_from_str("2016-01-04 00:00:00", "%Y-%m-%d %H:%M:%S").unwrap();
        let v = ExternalVector::from_timestamp(ts, 30, &[]).unwrap();
        assert_eq!(v.day_of_week(), 0);
        assert_eq!(v.step_of_day(), 0);
        let ts = NaiveDateTime::parse_from_str("2016-01-09 23:45:00", "%Y-%m-%d %H:%M:%S").unwrap();
        let v = ExternalVector::from_timestamp(ts, 30, &[]).unwrap();
        assert_eq!(v.day_of_week(), 5);
        assert_eq!(v.step_of_day(), 47);
    }

    fn encoder(seed: u64, input: usize, d: usize) -> (ParamStore, TemporalEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = TemporalEncoder::new(&mut store, "tpe", input, d, &mut rng);
        (store, enc)
    }

    #[test]
    fn zero_weights_give_one_half() {
        let (mut store, enc) = encoder(0, 11, 6);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = g.bind(&store);
        let r = g.constant(Tensor::full([3, 11], 1.0));
        let t = enc.forward(&mut g, &p, r).unwrap();
        assert_eq!(g.shape(t), &[3, 1, 6]);
        assert!(g.value(t).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_calendar_rows_encode_identically() {
        let (store, enc) = encoder(1, 7 + 4, 6);
        let v = ExternalVector::new(2, 1, 4, &[]).unwrap();
        let w = ExternalVector::new(5, 3, 4, &[]).unwrap();
        let r = stack_external(&[v.clone(), w, v]).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&store);
        let r = g.constant(r);
        let t = enc.forward(&mut g, &p, r).unwrap();
        let d = g.value(t).data();
        assert_eq!(&d[0..6], &d[12..18]);
        assert!(d.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    /// Straight-line reimplementation of the two-layer network.
    #[test]
    fn temporal_encoding_matches_reference() {
        let (store, enc) = encoder(5, 9, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = Tensor::from_fn([3, 9], |_| rng.random_range(0.0..1.0));
        let mut g = Graph::new();
        let p = g.bind(&store);
        let rv = g.constant(r.clone());
        let out = enc.forward(&mut g, &p, rv).unwrap();

        let w1 = store.by_name("tpe.1.w").unwrap().data();
        let b1 = store.by_name("tpe.1.b").unwrap().data();
        let w2 = store.by_name("tpe.2.w").unwrap().data();
        let b2 = store.by_name("tpe.2.b").unwrap().data();
        for t in 0..3 {
            let row = &r.data()[t * 9..(t + 1) * 9];
            let hidden: Vec<f64> = (0..4)
                .map(|j| (b1[j] + (0..9).map(|i| row[i] * w1[i * 4 + j]).sum::<f64>()).max(0.0))
                .collect();
            for j in 0..4 {
                let z = b2[j] + (0..4).map(|i| hidden[i] * w2[i * 4 + j]).sum::<f64>();
                let expect = 1.0 / (1.0 + (-z).exp());
                assert!((g.value(out).data()[t * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stpe_is_broadcast_sum() {
        let mut g = Graph::new();
        let spe = g.constant(Tensor::from_fn([1, 6, 4], |i| i as f64));
        let tpe = g.constant(Tensor::from_fn([3, 1, 4], |i| 100.0 * i as f64));
        let s = stpe(&mut g, spe, tpe).unwrap();
        assert_eq!(g.shape(s), &[3, 6, 4]);
        let (sv, pv, tv) = (g.value(s), g.value(spe), g.value(tpe));
        for k in 0..4 {
            assert_eq!(sv.at(&[2, 5, k]), pv.at(&[0, 5, k]) + tv.at(&[2, 0, k]));
        }
        let zero_t = g.constant(Tensor::zeros([3, 1, 4]));
        let s = stpe(&mut g, spe, zero_t).unwrap();
        for t in 0..3 {
            for n in 0..6 {
                for k in 0..4 {
                    assert_eq!(g.value(s).at(&[t, n, k]), g.value(spe).at(&[0, n, k]));
                }
            }
        }
        let zero_s = g.constant(Tensor::zeros([1, 6, 4]));
        let s = stpe(&mut g, zero_s, tpe).unwrap();
        for t in 0..3 {
            for n in 0..6 {
                for k in 0..4 {
                    assert_eq!(g.value(s).at(&[t, n, k]), g.value(tpe).at(&[t, 0, k]));
                }
            }
        }
    }
}
