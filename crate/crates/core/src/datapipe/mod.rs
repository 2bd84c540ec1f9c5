//! Grid time series, their on-disk container, and everything that turns raw
//! events into model samples.

mod aggregate;
mod norm;
mod samples;
mod synth;

use std::io::{self, Read, Write};

use chrono::{DateTime, NaiveDateTime, TimeDelta};
use thiserror::Error;

pub use aggregate::{aggregate_events, Accumulate, AggregateReport, AggregationSpec, FeatureSpec, GeoBounds};
pub use norm::NormStats;
pub use samples::{build_samples, history_offsets, samples_at, validate_indices, SampleSpec, SkipCounts};
pub use synth::{synth_generate, SynthSpec};

use crate::encodings::{steps_per_day, EncodingError, ExternalVector};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a grid series file")]
    BadMagic,
    #[error("unsupported grid series version {0}")]
    Version(u32),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `T × N × b` non-negative values on an `I × J` map plus `T × c` external features.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSeries {
    pub rows: usize,
    pub cols: usize,
    pub features: usize,
    pub externals: usize,
    pub interval_minutes: u32,
    pub origin: NaiveDateTime,
    pub grid_size_meters: f64,
    /// Row-major `T × N × b`.
    pub data: Vec<f64>,
    /// Row-major `T × c`.
    pub external_data: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"DSANGRID";
const VERSION: u32 = 1;

impl GridSeries {
    /// All-zero series.
    #[allow(clippy::too_many_arguments)]
    pub fn zeros(
        steps: usize,
        rows: usize,
        cols: usize,
        features: usize,
        externals: usize,
        interval_minutes: u32,
        origin: NaiveDateTime,
        grid_size_meters: f64,
    ) -> Self {
        Self {
            rows,
            cols,
            features,
            externals,
            interval_minutes,
            origin,
            grid_size_meters,
            data: vec![0.0; steps * rows * cols * features],
            external_data: vec![0.0; steps * externals],
        }
    }

    pub fn grids(&self) -> usize {
        self.rows * self.cols
    }

    pub fn frame_len(&self) -> usize {
        self.grids() * self.features
    }

    pub fn steps(&self) -> usize {
        if self.frame_len() == 0 {
            0
        } else {
            self.data.len() / self.frame_len()
        }
    }

    pub fn steps_per_day(&self) -> Result<usize, EncodingError> {
        steps_per_day(self.interval_minutes)
    }

    pub fn index(&self, t: usize, grid: usize, k: usize) -> usize {
        (t * self.grids() + grid) * self.features + k
    }

    pub fn at(&self, t: usize, grid: usize, k: usize) -> f64 {
        self.data[self.index(t, grid, k)]
    }

    /// The `N × b` slice at step `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn push_frame(&mut self, frame: &[f64], externals: &[f64]) {
        assert_eq!(frame.len(), self.frame_len(), "frame size");
        assert_eq!(externals.len(), self.externals, "external size");
        self.data.extend_from_slice(frame);
        self.external_data.extend_from_slice(externals);
    }

    /// Copy holding only steps `0..steps`.
    pub fn truncated(&self, steps: usize) -> Self {
        let mut s = self.clone();
        s.data.truncate(steps * self.frame_len());
        s.external_data.truncate(steps * self.externals);
        s
    }

    pub fn externals_at(&self, t: usize) -> &[f64] {
        &self.external_data[t * self.externals..(t + 1) * self.externals]
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.origin + TimeDelta::minutes(t as i64 * self.interval_minutes as i64)
    }

    /// Calendar one-hots and external features of step `t`. Steps past the end
    /// of the series get their calendar with externals zeroed.
    pub fn external_vector(&self, t: usize, with_externals: bool) -> Result<ExternalVector, EncodingError> {
        let ext = if with_externals && t < self.steps() {
            self.externals_at(t).to_vec()
        } else {
            vec![0.0; self.externals]
        };
        ExternalVector::from_timestamp(self.timestamp(t), self.interval_minutes, &ext)
    }

    /// `T × N × b` tensor view of the data.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.steps(), self.grids(), self.features], self.data.clone()).expect("series shape")
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [self.steps(), self.rows, self.cols, self.features, self.externals] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.interval_minutes.to_le_bytes())?;
        w.write_all(&self.origin.and_utc().timestamp().to_le_bytes())?;
        w.write_all(&self.grid_size_meters.to_le_bytes())?;
        for v in self.data.iter().chain(&self.external_data) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, DataError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DataError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(DataError::Version(version));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            r.read_exact(&mut b8)?;
            *d = u64::from_le_bytes(b8) as usize;
        }
        let [steps, rows, cols, features, externals] = dims;
        r.read_exact(&mut b4)?;
        let interval_minutes = u32::from_le_bytes(b4);
        r.read_exact(&mut b8)?;
        let origin = DateTime::from_timestamp(i64::from_le_bytes(b8), 0)
            .ok_or_else(|| DataError::Format("origin timestamp out of range".into()))?
            .naive_utc();
        r.read_exact(&mut b8)?;
        let grid_size_meters = f64::from_le_bytes(b8);
        let mut read_f64s = |n: usize| -> io::Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let data = read_f64s(steps * rows * cols * features)?;
        let external_data = read_f64s(steps * externals)?;
        if let Some(v) = data.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(DataError::Format(format!("negative or NaN value {v} in series")));
        }
        Ok(Self {
            rows,
            cols,
            features,
            externals,
            interval_minutes,
            origin,
            grid_size_meters,
            data,
            external_data,
        })
    }
}

/// Midnight, 4 January 2016 (a Monday).
pub fn default_origin() -> NaiveDateTime {
    NaiveDateTime::parse_from_str("2016-01-04 00:00:00", "%Y-%m-%d %H:%M:%S").expect("literal date")
}
