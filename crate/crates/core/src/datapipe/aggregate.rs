//! Binning of delimited event records into a grid series.
//!
//! Input is CSV with a header naming at least `timestamp` and `kind`, plus
//! either `row`,`col` grid indices or `lat`,`lon` coordinates, and an
//! optional `value` column. Malformed lines and records outside the map or
//! time window are skipped and counted.

use std::io::Read;

use chrono::{DateTime, NaiveDateTime, NaiveTime, TimeDelta};
use serde::{Deserialize, Serialize};

use super::{default_origin, DataError, GridSeries};
use crate::encodings::steps_per_day;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulate {
    /// Each record adds one.
    #[default]
    Count,
    /// Each record adds its `value` column.
    Sum,
}

/// One output feature and the record kinds that feed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kinds: Vec<String>,
    #[serde(default)]
    pub accumulate: Accumulate,
}

/// Latitude/longitude box mapped onto the grid; row 0 is the southern edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationSpec {
    pub rows: usize,
    pub cols: usize,
    pub interval_minutes: u32,
    /// First bin start; defaults to midnight before the earliest record.
    pub origin: Option<NaiveDateTime>,
    /// Number of bins; defaults to whole days through the latest record.
    pub steps: Option<usize>,
    pub features: Vec<FeatureSpec>,
    pub bounds: Option<GeoBounds>,
    pub grid_size_meters: f64,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        Self {
            rows: 10,
            cols: 20,
            interval_minutes: 30,
            origin: None,
            steps: None,
            features: vec![
                FeatureSpec {
                    name: "inflow".into(),
                    kinds: vec!["end".into(), "dropoff".into(), "inflow".into()],
                    accumulate: Accumulate::Count,
                },
                FeatureSpec {
                    name: "outflow".into(),
                    kinds: vec!["start".into(), "pickup".into(), "outflow".into()],
                    accumulate: Accumulate::Count,
                },
            ],
            bounds: None,
            grid_size_meters: 1000.0,
        }
    }
}

/// Per-category record counts from one aggregation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AggregateReport {
    pub records: usize,
    pub accepted: usize,
    pub malformed: usize,
    pub out_of_bounds: usize,
    pub unknown_kind: usize,
}

impl AggregateReport {
    pub fn dropped(&self) -> usize {
        self.malformed + self.out_of_bounds + self.unknown_kind
    }
}

enum Location {
    Grid { row: usize, col: usize },
    Geo { lat: usize, lon: usize },
}

struct Columns {
    timestamp: usize,
    kind: usize,
    location: Location,
    value: Option<usize>,
}

fn find_columns(headers: &csv::StringRecord) -> Result<Columns, DataError> {
    let find = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let missing = |what: &str| DataError::Format(format!("record header lacks a `{what}` column"));
    let timestamp = find("timestamp").ok_or_else(|| missing("timestamp"))?;
    let kind = find("kind").ok_or_else(|| missing("kind"))?;
    let location = match (find("row"), find("col"), find("lat"), find("lon")) {
        (Some(row), Some(col), _, _) => Location::Grid { row, col },
        (_, _, Some(lat), Some(lon)) => Location::Geo { lat, lon },
        _ => return Err(missing("row/col or lat/lon")),
    };
    Ok(Columns {
        timestamp,
        kind,
        location,
        value: find("value"),
    })
}

/// Accepts `YYYY-MM-DD HH:MM[:SS]`, the same with a `T` separator, or integer Unix seconds.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    s.parse::<i64>()
        .ok()
        .and_then(|secs| DateTime::from_timestamp(secs, 0))
        .map(|t| t.naive_utc())
}

struct Event {
    time: NaiveDateTime,
    grid: usize,
    feature: usize,
    amount: f64,
}

enum Parsed {
    Event(Event),
    Malformed,
    OutOfBounds,
    UnknownKind,
}

fn parse_record(rec: &csv::StringRecord, cols: &Columns, spec: &AggregationSpec) -> Parsed {
    let field = |i: usize| rec.get(i).map(str::trim);
    let Some(time) = field(cols.timestamp).and_then(parse_timestamp) else {
        return Parsed::Malformed;
    };
    let Some(kind) = field(cols.kind) else {
        return Parsed::Malformed;
    };
    let cell = match cols.location {
        Location::Grid { row, col } => {
            let r = field(row).and_then(|s| s.parse::<i64>().ok());
            let c = field(col).and_then(|s| s.parse::<i64>().ok());
            match (r, c) {
                (Some(r), Some(c)) => Some((r, c)),
                _ => return Parsed::Malformed,
            }
        }
        Location::Geo { lat, lon } => {
            let la = field(lat).and_then(|s| s.parse::<f64>().ok());
            let lo = field(lon).and_then(|s| s.parse::<f64>().ok());
            let (Some(la), Some(lo)) = (la, lo) else {
                return Parsed::Malformed;
            };
            let Some(b) = spec.bounds else {
                return Parsed::OutOfBounds;
            };
            if !(b.min_lat..b.max_lat).contains(&la) || !(b.min_lon..b.max_lon).contains(&lo) {
                return Parsed::OutOfBounds;
            }
            let r = ((la - b.min_lat) / (b.max_lat - b.min_lat) * spec.rows as f64).floor() as i64;
            let c = ((lo - b.min_lon) / (b.max_lon - b.min_lon) * spec.cols as f64).floor() as i64;
            Some((r, c))
        }
    };
    let (r, c) = cell.expect("cell resolved");
    if r < 0 || c < 0 || r >= spec.rows as i64 || c >= spec.cols as i64 {
        return Parsed::OutOfBounds;
    }
    let Some(feature) = spec
        .features
        .iter()
        .position(|f| f.kinds.iter().any(|k| k.eq_ignore_ascii_case(kind)))
    else {
        return Parsed::UnknownKind;
    };
    let amount = match spec.features[feature].accumulate {
        Accumulate::Count => 1.0,
        Accumulate::Sum => match cols.value.and_then(field).and_then(|s| s.parse::<f64>().ok()) {
            Some(v) if v >= 0.0 && v.is_finite() => v,
            _ => return Parsed::Malformed,
        },
    };
    Parsed::Event(Event {
        time,
        grid: r as usize * spec.cols + c as usize,
        feature,
        amount,
    })
}

/// Bins every accepted record of `input` into its `(step, grid, feature)` cell.
/// Fails only when the header itself is unusable.
pub fn aggregate_events(input: impl Read, spec: &AggregationSpec) -> Result<(GridSeries, AggregateReport), DataError> {
    let spd = steps_per_day(spec.interval_minutes)?;
    if spec.rows == 0 || spec.cols == 0 || spec.features.is_empty() {
        return Err(DataError::Format(
            "aggregation needs a non-empty grid and at least one feature".into(),
        ));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let cols = find_columns(&headers)?;
    let mut report = AggregateReport::default();
    let mut events = Vec::new();
    for rec in reader.records() {
        report.records += 1;
        let Ok(rec) = rec else {
            report.malformed += 1;
            continue;
        };
        match parse_record(&rec, &cols, spec) {
            Parsed::Event(e) => events.push(e),
            Parsed::Malformed => report.malformed += 1,
            Parsed::OutOfBounds => report.out_of_bounds += 1,
            Parsed::UnknownKind => report.unknown_kind += 1,
        }
    }

    let origin = spec.origin.unwrap_or_else(|| {
        events
            .iter()
            .map(|e| e.time)
            .min()
            .map_or_else(default_origin, |t| t.date().and_time(NaiveTime::MIN))
    });
    let interval = TimeDelta::minutes(spec.interval_minutes as i64);
    let bin = |t: NaiveDateTime| -> Option<usize> {
        let elapsed = t - origin;
        (elapsed >= TimeDelta::zero()).then(|| (elapsed.num_seconds() / interval.num_seconds()) as usize)
    };
    let steps = spec.steps.unwrap_or_else(|| {
        events
            .iter()
            .filter_map(|e| bin(e.time))
            .max()
            .map_or(0, |last| (last / spd + 1) * spd)
    });

    let mut series = GridSeries::zeros(
        steps,
        spec.rows,
        spec.cols,
        spec.features.len(),
        0,
        spec.interval_minutes,
        origin,
        spec.grid_size_meters,
    );
    for e in events {
        match bin(e.time).filter(|&t| t < steps) {
            Some(t) => {
                let i = series.index(t, e.grid, e.feature);
                series.data[i] += e.amount;
                report.accepted += 1;
            }
            None => report.out_of_bounds += 1,
        }
    }
    Ok((series, report))
}
