use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};

use super::SignalError;
use crate::diffcore::Tensor;
use crate::geo::LatLon;
use crate::region_graph::io::{format_timestamp, interpolate, parse_timestamp};

pub const WEATHER_FIELDS: [&str; 4] = ["t2m", "ssr", "sro", "tp"];
const MAX_GAP_HOURS: i64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Station {
    pub id: String,
    pub coord: LatLon,
}

/// Hourly gridded weather, `values` shaped `[T_h, N_w, 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherTable {
    pub stations: Vec<Station>,
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Tensor,
}

/// Per-variable mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeatherStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl WeatherStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 4],
            std: [1.0; 4],
        }
    }
}

impl WeatherTable {
    pub fn hours(&self) -> usize {
        self.timestamps.len()
    }

    pub fn coords(&self) -> Vec<LatLon> {
        self.stations.iter().map(|s| s.coord).collect()
    }

    /// Latest hour at or before `ts`, clamped to the first hour.
    pub fn hour_at(&self, ts: NaiveDateTime) -> usize {
        self.timestamps.partition_point(|&h| h <= ts).saturating_sub(1)
    }

    /// Statistics over hours `[0, until)` and all stations.
    pub fn stats(&self, until: usize) -> WeatherStats {
        let until = until.clamp(1, self.hours());
        let nw = self.stations.len();
        let mut st = WeatherStats::identity();
        for c in 0..4 {
            let vals: Vec<f64> = (0..until * nw).map(|r| self.values.data()[r * 4 + c]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            st.mean[c] = m;
            st.std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        st
    }

    /// Standardised `[t_w, N, 4]` window ending at hour `end` for each
    /// sensor's matched station; hours before the record repeat the first.
    pub fn window(&self, index_map: &[usize], end: usize, t_w: usize, stats: &WeatherStats) -> Tensor {
        let nw = self.stations.len();
        let n = index_map.len();
        let mut data = Vec::with_capacity(t_w * n * 4);
        for k in 0..t_w {
            let h = (end + k + 1).saturating_sub(t_w);
            for &j in index_map {
                for c in 0..4 {
                    let v = self.values.data()[(h * nw + j) * 4 + c];
                    data.push((v - stats.mean[c]) / stats.std[c]);
                }
            }
        }
        Tensor::new(vec![t_w, n, 4], data).expect("shape")
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> SignalError {
    SignalError::Data(format!("{}: {e}", path.display()))
}

/// Reads `timestamp,station_id,lat,lon,t2m,ssr,sro,tp` rows into a grid.
///
/// Missing hours are interpolated per station; a run of more than three
/// missing hours is an error.
pub fn read_weather(path: &Path) -> Result<WeatherTable, SignalError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| data_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| data_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let expected = ["timestamp", "station_id", "lat", "lon", "t2m", "ssr", "sro", "tp"];
    if header != expected {
        return Err(data_err(path, format!("expected header {}", expected.join(","))));
    }
    let mut stations: Vec<Station> = Vec::new();
    let mut station_idx: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(NaiveDateTime, usize, [f64; 4])> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        let num = |i: usize| -> Result<f64, SignalError> {
            let s = rec.get(i).unwrap_or("").trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| data_err(path, format!("row {}: bad number `{s}`", line + 2)))
        };
        let ts = parse_timestamp(rec.get(0).unwrap_or("")).map_err(|e| data_err(path, e))?;
        let id = rec.get(1).unwrap_or("").trim().to_string();
        let j = match station_idx.get(&id) {
            Some(&j) => j,
            None => {
                stations.push(Station {
                    id: id.clone(),
                    coord: LatLon::new(num(2)?, num(3)?),
                });
                station_idx.insert(id, stations.len() - 1);
                stations.len() - 1
            }
        };
        rows.push((ts, j, [num(4)?, num(5)?, num(6)?, num(7)?]));
    }
    if rows.is_empty() {
        return Err(SignalError::NoStations);
    }
    let times: BTreeSet<NaiveDateTime> = rows.iter().map(|r| r.0).collect();
    let first = *times.iter().next().unwrap();
    let last = *times.iter().next_back().unwrap();
    let span = (last - first).num_minutes();
    if times.iter().any(|t| (*t - first).num_minutes() % 60 != 0) {
        return Err(data_err(path, "timestamps must lie on an hourly grid"));
    }
    let hours = (span / 60) as usize + 1;
    let nw = stations.len();
    let mut raw: Vec<Option<[f64; 4]>> = vec![None; hours * nw];
    for (ts, j, v) in rows {
        let h = ((ts - first).num_minutes() / 60) as usize;
        raw[h * nw + j] = Some(v);
    }
    let mut values = vec![0.0; hours * nw * 4];
    for (j, st) in stations.iter().enumerate() {
        let mut run = 0i64;
        for h in 0..hours {
            if raw[h * nw + j].is_none() {
                run += 1;
                if run > MAX_GAP_HOURS {
                    return Err(SignalError::GapTooLarge {
                        station: st.id.clone(),
                        hours: run,
                    });
                }
            } else {
                run = 0;
            }
        }
        for c in 0..4 {
            let col: Vec<Option<f64>> = (0..hours).map(|h| raw[h * nw + j].map(|v| v[c])).collect();
            let filled = interpolate(&col).ok_or(SignalError::NoStations)?;
            for (h, v) in filled.into_iter().enumerate() {
                values[(h * nw + j) * 4 + c] = v;
            }
        }
    }
    let timestamps = (0..hours).map(|h| first + Duration::hours(h as i64)).collect();
    Ok(WeatherTable {
        stations,
        timestamps,
        values: Tensor::new(vec![hours, nw, 4], values).expect("shape"),
    })
}

pub fn write_weather(path: &Path, table: &WeatherTable) -> Result<(), SignalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| data_err(path, e))?;
    w.write_record(["timestamp", "station_id", "lat", "lon", "t2m", "ssr", "sro", "tp"])
        .map_err(|e| data_err(path, e))?;
    let nw = table.stations.len();
    for (h, ts) in table.timestamps.iter().enumerate() {
        for (j, st) in table.stations.iter().enumerate() {
            let mut rec = vec![
                format_timestamp(ts),
                st.id.clone(),
                st.coord.lat.to_string(),
                st.coord.lon.to_string(),
            ];
            for c in 0..4 {
                rec.push(table.values.data()[(h * nw + j) * 4 + c].to_string());
            }
            w.write_record(&rec).map_err(|e| data_err(path, e))?;
        }
    }
    w.flush().map_err(|e| data_err(path, e))
}
