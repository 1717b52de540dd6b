//! Raw hourly measurements to an aligned, gap-free panel.
//!
//! Measurements arrive in long format (`station_id,timestamp,value`, an
//! empty or `NA` value marking a missing reading). All stations are placed
//! on one hourly grid spanning the requested window (by default the
//! earliest to the latest timestamp in the file); completeness is the share
//! of grid hours with a reading. Stations below the threshold are dropped,
//! the rest are gap-filled by [`impute_backward_forward`].

use std::collections::BTreeMap;
use std::io::Read;

use chrono::{DateTime, NaiveDateTime, Timelike};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fourier::{fourier_design, Frequency};
use crate::model::PanelData;

pub const DEFAULT_COMPLETENESS: f64 = 0.90;

/// Station metadata, one row per monitoring site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub station_id: String,
    pub name: String,
    pub latitude: f64,
    pub longitude: f64,
    pub location_type: String,
}

pub fn read_stations<R: Read>(input: R) -> Result<Vec<Station>> {
    let mut rdr = csv::Reader::from_reader(input);
    let stations: Vec<Station> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let mut ids: Vec<&str> = stations.iter().map(|s| s.station_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Ingest(format!("station '{}' listed twice", w[0])));
    }
    Ok(stations)
}

/// Parses ISO-8601 timestamps with or without a UTC offset (offsets are
/// converted to UTC) and with `T` or a space as separator.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt);
        }
    }
    Err(Error::Parse(format!("'{s}' is not an ISO-8601 timestamp")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completeness {
    pub station_id: String,
    pub observed: usize,
    pub fraction: f64,
    pub kept: bool,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    /// Kept stations, in ascending id order; rows of `values`.
    pub station_ids: Vec<String>,
    /// Gap-filled responses, stations x hours.
    pub values: DMatrix<f64>,
    pub start: NaiveDateTime,
    pub hours: usize,
    pub report: Vec<Completeness>,
}

impl Ingested {
    /// Panel with the responses and a Fourier design. Phases are measured
    /// from 1970-01-01T00:00 UTC so that any window yields the same
    /// calendar alignment.
    pub fn to_panel(&self, frequencies: &[Frequency]) -> Result<PanelData> {
        let offset = (self.start - DateTime::UNIX_EPOCH.naive_utc()).num_hours() as f64;
        let x = fourier_design(self.station_ids.len(), self.hours, offset, frequencies)?;
        PanelData::new(self.values.clone(), x)
    }
}

/// Fills each gap with the next observed value, then any trailing gap with
/// the last observed value.
pub fn impute_backward_forward(series: &[Option<f64>]) -> Result<Vec<f64>> {
    let mut out: Vec<Option<f64>> = series.to_vec();
    let mut next = None;
    for v in out.iter_mut().rev() {
        match v {
            Some(x) => next = Some(*x),
            None => *v = next,
        }
    }
    let mut prev = None;
    for v in out.iter_mut() {
        match v {
            Some(x) => prev = Some(*x),
            None => *v = prev,
        }
    }
    out.into_iter()
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::Ingest("series has no observed value".into()))
}

/// Reads measurements, aligns them on the hourly grid `[start, end]` (file
/// range when `None`), drops stations with completeness below `threshold`,
/// and imputes the rest.
pub fn ingest<R: Read>(
    measurements: R,
    threshold: f64,
    window: Option<(NaiveDateTime, NaiveDateTime)>,
) -> Result<Ingested> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("completeness threshold {threshold} outside [0, 1]")));
    }
    let mut rdr = csv::Reader::from_reader(measurements);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("measurement CSV lacks a '{name}' column")))
    };
    let (c_id, c_ts, c_val) = (col("station_id")?, col("timestamp")?, col("value")?);

    let mut readings: BTreeMap<String, BTreeMap<NaiveDateTime, Option<f64>>> = BTreeMap::new();
    let mut duplicates = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[c_id].trim().to_string();
        let ts = parse_timestamp(&rec[c_ts])?;
        if ts.minute() != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
            return Err(Error::Ingest(format!("line {line}: {ts} is not on the hour")));
        }
        let raw = rec[c_val].trim();
        let value = if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
            None
        } else {
            Some(raw.parse::<f64>().map_err(|_| Error::Parse(format!("line {line}: bad value '{raw}'")))?)
        };
        if readings.entry(id.clone()).or_default().insert(ts, value).is_some() {
            duplicates.push(format!("{id}@{ts}"));
        }
    }
    if !duplicates.is_empty() {
        return Err(Error::Ingest(format!("duplicate (station, timestamp) rows: {}", duplicates.join(", "))));
    }
    let (start, end) = match window {
        Some(w) => w,
        None => {
            let first = readings.values().filter_map(|m| m.keys().next()).min();
            let last = readings.values().filter_map(|m| m.keys().next_back()).max();
            match (first, last) {
                (Some(a), Some(b)) => (*a, *b),
                _ => return Err(Error::Ingest("no measurements".into())),
            }
        }
    };
    if end < start {
        return Err(Error::Config("window end precedes its start".into()));
    }
    let hours = usize::try_from((end - start).num_hours()).expect("end >= start") + 1;

    let mut report = Vec::new();
    let mut kept = Vec::new();
    for (id, series) in &readings {
        let mut grid = vec![None; hours];
        for (ts, v) in series.range(start..=end) {
            let h = (*ts - start).num_hours() as usize;
            grid[h] = *v;
        }
        let observed = grid.iter().filter(|v| v.is_some()).count();
        let fraction = observed as f64 / hours as f64;
        let keep = fraction >= threshold && observed > 0;
        report.push(Completeness { station_id: id.clone(), observed, fraction, kept: keep });
        if keep {
            kept.push((id.clone(), impute_backward_forward(&grid)?));
        } else {
            log::info!("dropping station {id}: completeness {fraction:.3} < {threshold}");
        }
    }
    if kept.is_empty() {
        return Err(Error::Ingest(format!("no station reaches completeness {threshold}")));
    }
    let values = DMatrix::from_fn(kept.len(), hours, |i, t| kept[i].1[t]);
    Ok(Ingested { station_ids: kept.into_iter().map(|(id, _)| id).collect(), values, start, hours, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_rules() {
        assert_eq!(impute_backward_forward(&[Some(1.0), None, Some(3.0)]).unwrap(), vec![1.0, 3.0, 3.0]);
        assert_eq!(impute_backward_forward(&[None, Some(2.0)]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(impute_backward_forward(&[Some(2.0), None, None]).unwrap(), vec![2.0, 2.0, 2.0]);
        assert!(impute_backward_forward(&[None, None]).is_err());
        let full = [Some(1.5), Some(-2.0)];
        assert_eq!(impute_backward_forward(&full).unwrap(), vec![1.5, -2.0]);
    }

    fn csv_for(series: &[(&str, Vec<Option<f64>>)]) -> String {
        let mut s = String::from("station_id,timestamp,value\n");
        for (id, values) in series {
            for (h, v) in values.iter().enumerate() {
                let ts = format!("2020-01-{:02}T{:02}:00:00", 1 + h / 24, h % 24);
                let v = v.map(|x| x.to_string()).unwrap_or_default();
                s.push_str(&format!("{id},{ts},{v}\n"));
            }
        }
        s
    }

    #[test]
    fn sparse_station_is_dropped() {
        let full: Vec<Option<f64>> = (0..20).map(|h| Some(h as f64)).collect();
        let mut sparse = full.clone();
        for h in [2, 5, 9] {
            sparse[h] = None;
        }
        let text = csv_for(&[("A", full.clone()), ("B", sparse)]);
        let ing = ingest(text.as_bytes(), 0.9, None).unwrap();
        assert_eq!(ing.station_ids, vec!["A"]);
        let b = ing.report.iter().find(|r| r.station_id == "B").unwrap();
        assert!(!b.kept && (b.fraction - 0.85).abs() < 1e-12);
        let expected: Vec<f64> = (0..20).map(|h| h as f64).collect();
        assert_eq!(ing.values.row(0).iter().copied().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn complete_input_is_preserved_and_panelled() {
        let a: Vec<Option<f64>> = (0..30).map(|h| Some(0.1 * h as f64 - 1.3)).collect();
        let b: Vec<Option<f64>> = (0..30).map(|h| Some((h as f64).sqrt())).collect();
        let text = csv_for(&[("B", b.clone()), ("A", a.clone())]);
        let ing = ingest(text.as_bytes(), 0.9, None).unwrap();
        assert_eq!(ing.station_ids, vec!["A", "B"]);
        for t in 0..30 {
            assert_eq!(ing.values[(0, t)], a[t].unwrap());
            assert_eq!(ing.values[(1, t)], b[t].unwrap());
        }
        let panel = ing.to_panel(&[Frequency::Daily]).unwrap();
        assert_eq!((panel.n(), panel.t(), panel.k()), (2, 30, 2));
        // 2020-01-01T06:00 is a quarter day past midnight
        assert!((panel.x()[6][(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_and_off_hour_stamps_fail() {
        let text = "station_id,timestamp,value\nA,2020-01-01T00:00:00,1\nA,2020-01-01T00:00:00,2\n";
        assert!(matches!(ingest(text.as_bytes(), 0.9, None), Err(Error::Ingest(_))));
        let text = "station_id,timestamp,value\nA,2020-01-01T00:30:00,1\n";
        assert!(ingest(text.as_bytes(), 0.9, None).is_err());
    }

    #[test]
    fn offsets_convert_to_utc() {
        let a = parse_timestamp("2020-03-01T02:00:00+01:00").unwrap();
        let b = parse_timestamp("2020-03-01 01:00:00").unwrap();
        assert_eq!(a, b);
    }
}
