//! Sensor metadata and wide-format observation CSVs.

use std::path::Path;

use chrono::NaiveDateTime;

use super::{RegionError, TrafficTensor};
use crate::geo::LatLon;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime, RegionError> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .map_err(|e| RegionError::Data(format!("bad timestamp `{s}`: {e}")))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> RegionError {
    RegionError::Data(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sensor {
    pub node_id: String,
    pub coord: LatLon,
}

/// Reads `node_id,lat,lon`.
pub fn read_sensors(path: &Path) -> Result<Vec<Sensor>, RegionError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| data_err(path, e))?;
    let headers = rdr.headers().map_err(|e| data_err(path, e))?.clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols != ["node_id", "lat", "lon"] {
        return Err(data_err(path, format!("expected header node_id,lat,lon, found {cols:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        let num = |i: usize| -> Result<f64, RegionError> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| data_err(path, format!("row {}: {e}", line + 2)))
        };
        out.push(Sensor {
            node_id: rec.get(0).unwrap_or("").trim().to_string(),
            coord: LatLon::new(num(1)?, num(2)?),
        });
    }
    Ok(out)
}

pub fn write_sensors(path: &Path, sensors: &[Sensor]) -> Result<(), RegionError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| data_err(path, e))?;
    w.write_record(["node_id", "lat", "lon"]).map_err(|e| data_err(path, e))?;
    for s in sensors {
        w.write_record([
            s.node_id.clone(),
            format!("{}", s.coord.lat),
            format!("{}", s.coord.lon),
        ])
        .map_err(|e| data_err(path, e))?;
    }
    w.flush().map_err(|e| data_err(path, e))
}

/// Reads a wide observation CSV (timestamp column, one column per node).
///
/// Empty cells are linearly interpolated along time (held constant past
/// either end) and marked unobserved in the mask.
pub fn read_observations(path: &Path) -> Result<TrafficTensor, RegionError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| data_err(path, e))?;
    let headers = rdr.headers().map_err(|e| data_err(path, e))?.clone();
    if headers.len() < 2 {
        return Err(data_err(path, "need a timestamp column and at least one node"));
    }
    let node_ids: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let n = node_ids.len();
    let mut timestamps = Vec::new();
    let mut raw: Vec<Option<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        timestamps.push(parse_timestamp(rec.get(0).unwrap_or(""))?);
        for i in 0..n {
            let cell = rec.get(i + 1).unwrap_or("").trim();
            if cell.is_empty() {
                raw.push(None);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|e| data_err(path, format!("row {}: {e}", line + 2)))?;
                raw.push(if v.is_finite() { Some(v) } else { None });
            }
        }
    }
    if timestamps.len() < 2 {
        return Err(data_err(path, "need at least two time steps"));
    }
    let interval = (timestamps[1] - timestamps[0]).num_minutes();
    if interval <= 0 || 1440 % interval != 0 {
        return Err(data_err(path, format!("unsupported sampling interval {interval} min")));
    }
    for w in timestamps.windows(2) {
        if (w[1] - w[0]).num_minutes() != interval {
            return Err(data_err(path, format!("irregular timestamps at {}", w[1])));
        }
    }
    let steps = timestamps.len();
    let mask: Vec<bool> = raw.iter().map(Option::is_some).collect();
    let mut values = vec![0.0; steps * n];
    for node in 0..n {
        let col: Vec<Option<f64>> = (0..steps).map(|t| raw[t * n + node]).collect();
        let filled = interpolate(&col)
            .ok_or_else(|| data_err(path, format!("node {} has no observations", node_ids[node])))?;
        for (t, v) in filled.into_iter().enumerate() {
            values[t * n + node] = v;
        }
    }
    Ok(TrafficTensor {
        timestamps,
        node_ids,
        channels: 1,
        values,
        mask,
        interval_minutes: interval as u32,
    })
}

/// Linear interpolation over gaps; constant extension at the ends.
pub(crate) fn interpolate(col: &[Option<f64>]) -> Option<Vec<f64>> {
    let known: Vec<(usize, f64)> = col
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .collect();
    let (&(first_i, first_v), &(last_i, last_v)) = (known.first()?, known.last()?);
    let mut out = vec![0.0; col.len()];
    for o in out.iter_mut().take(first_i + 1) {
        *o = first_v;
    }
    for w in known.windows(2) {
        let ((i0, v0), (i1, v1)) = (w[0], w[1]);
        for (i, o) in out.iter_mut().enumerate().take(i1 + 1).skip(i0) {
            let f = (i - i0) as f64 / (i1 - i0) as f64;
            *o = v0 + f * (v1 - v0);
        }
    }
    for o in out.iter_mut().skip(last_i) {
        *o = last_v;
    }
    Some(out)
}

pub fn write_observations(path: &Path, x: &TrafficTensor, channel: usize) -> Result<(), RegionError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| data_err(path, e))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(x.node_ids.iter().cloned());
    w.write_record(&header).map_err(|e| data_err(path, e))?;
    for t in 0..x.steps() {
        let mut row = vec![format_timestamp(&x.timestamps[t])];
        for n in 0..x.nodes() {
            if x.observed(t, n) {
                row.push(format!("{}", x.get(t, n, channel)));
            } else {
                row.push(String::new());
            }
        }
        w.write_record(&row).map_err(|e| data_err(path, e))?;
    }
    w.flush().map_err(|e| data_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn interpolation_fills_gaps_and_ends() {
        let col = [None, Some(2.0), None, None, Some(8.0), None];
        assert_eq!(interpolate(&col).unwrap(), vec![2.0, 2.0, 4.0, 6.0, 8.0, 8.0]);
        assert!(interpolate(&[None, None]).is_none());
    }

    #[test]
    fn reads_wide_csv_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "timestamp,a,b").unwrap();
        writeln!(f, "2024-01-01T00:00:00,1,10").unwrap();
        writeln!(f, "2024-01-01T00:05:00,,20").unwrap();
        writeln!(f, "2024-01-01T00:10:00,3,").unwrap();
        drop(f);
        let x = read_observations(&p).unwrap();
        assert_eq!(x.interval_minutes, 5);
        assert_eq!(x.series(0, 0), vec![1.0, 2.0, 3.0]);
        assert_eq!(x.series(1, 0), vec![10.0, 20.0, 20.0]);
        assert!(!x.observed(1, 0) && x.observed(1, 1) && !x.observed(2, 1));
    }

    #[test]
    fn sensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sensors.csv");
        let s = vec![
            Sensor { node_id: "s1".into(), coord: LatLon::new(37.25, -121.5) },
            Sensor { node_id: "s2".into(), coord: LatLon::new(37.5, -121.25) },
        ];
        write_sensors(&p, &s).unwrap();
        assert_eq!(read_sensors(&p).unwrap(), s);
    }

    #[test]
    fn sensor_header_required() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sensors.csv");
        std::fs::write(&p, "id,y,x\ns1,1,2\n").unwrap();
        assert!(matches!(read_sensors(&p), Err(RegionError::Data(_))));
    }
}
