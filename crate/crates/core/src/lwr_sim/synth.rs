use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Boundary, Corridor, SimError};
use crate::diffcore::Tensor;
use crate::external_signals::{write_weather, Station, WeatherTable};
use crate::geo::{LatLon, Projection};
use crate::region_graph::io::{write_observations, write_sensors, Sensor};
use crate::region_graph::TrafficTensor;

/// Hourly rain schedule; rain scales every cell's free-flow speed.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherDriver {
    pub rain_factor: f64,
    /// Half-open hour ranges `[start, end)` counted from the dataset start.
    pub rain_hours: Vec<(usize, usize)>,
    /// Probability that a day gets one extra random episode.
    pub random_episode_prob: f64,
    pub episode_hours: (usize, usize),
}

impl Default for WeatherDriver {
    fn default() -> Self {
        Self {
            rain_factor: 0.8,
            rain_hours: Vec::new(),
            random_episode_prob: 0.5,
            episode_hours: (2, 6),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub corridor: Corridor,
    /// Sensor positions in km from the upstream end.
    pub sensor_positions: Vec<f64>,
    pub days: usize,
    pub interval_minutes: u32,
    pub start: NaiveDateTime,
    pub noise_std: f64,
    pub seed: u64,
    pub weather: WeatherDriver,
    pub origin: LatLon,
    /// Corridor heading, degrees clockwise from north.
    pub bearing_deg: f64,
    /// Amplitude of the sideways meander of the road, km.
    pub meander_km: f64,
    pub station_spacing_km: f64,
}

impl SynthConfig {
    /// A 20 km corridor with evenly spaced sensors and default weather.
    pub fn corridor(sensors: usize, days: usize, interval_minutes: u32) -> Self {
        let cells = 100;
        let length = 20.0;
        let x_fspd = (0..cells)
            .map(|i| 100.0 + 8.0 * (3.0 * std::f64::consts::PI * (i as f64 + 0.5) / cells as f64).sin())
            .collect();
        let corridor = Corridor {
            length,
            cells,
            rho_max: 120.0,
            x_fspd,
            boundary: Boundary::InflowOutflow {
                upstream: 0.0,
                downstream: 0.0,
            },
        };
        let sensor_positions = (0..sensors)
            .map(|i| length * (i as f64 + 0.5) / sensors as f64)
            .collect();
        Self {
            corridor,
            sensor_positions,
            days,
            interval_minutes,
            start: NaiveDate::from_ymd_opt(2024, 3, 4)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .expect("valid date"),
            noise_std: 0.0,
            seed: 7,
            weather: WeatherDriver::default(),
            origin: LatLon::new(37.35, -121.95),
            bearing_deg: 70.0,
            meander_km: 0.4,
            station_spacing_km: 9.0,
        }
    }
}

/// Simulated dataset in memory.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub sensors: Vec<Sensor>,
    pub sensor_cells: Vec<usize>,
    pub traffic: TrafficTensor,
    pub weather: WeatherTable,
    /// Densities at each sampled step, `samples × cells`.
    pub density: Vec<f64>,
    /// Free-flow multiplier in force at each sampled step.
    pub fspd_factor: Vec<f64>,
    /// Rain flag per hour from the dataset start.
    pub rain: Vec<bool>,
    pub cells: usize,
}

impl SynthData {
    /// Writes `sensors.csv`, `observations.csv`, `weather.csv` and `density.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), SimError> {
        let io = |e: &dyn std::fmt::Display| SimError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(|e| io(&e))?;
        write_sensors(&dir.join("sensors.csv"), &self.sensors).map_err(|e| io(&e))?;
        write_observations(&dir.join("observations.csv"), &self.traffic, 0).map_err(|e| io(&e))?;
        write_weather(&dir.join("weather.csv"), &self.weather).map_err(|e| io(&e))?;
        let mut w = csv::Writer::from_path(dir.join("density.csv")).map_err(|e| io(&e))?;
        w.write_record(["step", "cell", "rho"]).map_err(|e| io(&e))?;
        for (k, r) in self.density.iter().enumerate() {
            w.write_record([(k / self.cells).to_string(), (k % self.cells).to_string(), r.to_string()])
                .map_err(|e| io(&e))?;
        }
        w.flush().map_err(|e| io(&e))
    }
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((h - centre) / width).powi(2)).exp()
}

/// Day-level demand multipliers.
struct DayProfile {
    inflow: f64,
    morning_jam: f64,
    evening_jam: f64,
}

impl DayProfile {
    fn draw<R: Rng>(rng: &mut R, day: usize) -> Self {
        let weekend = day % 7 >= 5;
        let k = if weekend { 0.6 } else { 1.0 };
        Self {
            inflow: k * rng.gen_range(0.8..1.2),
            morning_jam: k * rng.gen_range(0.5..1.1),
            evening_jam: k * rng.gen_range(0.5..1.1),
        }
    }

    /// Upstream and downstream ghost densities at hour-of-day `h`.
    fn ghosts(&self, h: f64, rho_max: f64) -> (f64, f64) {
        let up = 0.08 + self.inflow * (0.30 * bump(h, 8.0, 1.2) + 0.26 * bump(h, 17.5, 1.5));
        let down = 0.05 + 0.7 * self.morning_jam * bump(h, 8.4, 0.9) + 0.65 * self.evening_jam * bump(h, 17.9, 1.1);
        (rho_max * up.min(0.49), rho_max * down.min(0.95))
    }
}

/// Simulates the corridor and samples sensors, weather and densities.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthData, SimError> {
    let c = &cfg.corridor;
    c.validate()?;
    if cfg.interval_minutes == 0 || 60 % cfg.interval_minutes != 0 {
        return Err(SimError::BadCorridor(format!(
            "interval {} min must divide an hour",
            cfg.interval_minutes
        )));
    }
    let sensor_cells = cfg
        .sensor_positions
        .iter()
        .map(|&s| {
            if !(0.0..=c.length).contains(&s) {
                Err(SimError::SensorOutOfCorridor(s))
            } else {
                Ok(((s / c.dx()) as usize).min(c.cells - 1))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hours = cfg.days * 24;
    let mut rain = vec![false; hours];
    for &(a, b) in &cfg.weather.rain_hours {
        for r in rain.iter_mut().take(b.min(hours)).skip(a) {
            *r = true;
        }
    }
    for day in 0..cfg.days {
        if rng.gen_bool(cfg.weather.random_episode_prob.clamp(0.0, 1.0)) {
            let start = day * 24 + rng.gen_range(0..24);
            let (lo, hi) = cfg.weather.episode_hours;
            let len = rng.gen_range(lo..=hi.max(lo));
            for r in rain.iter_mut().take((start + len).min(hours)).skip(start) {
                *r = true;
            }
        }
    }
    let profiles: Vec<DayProfile> = (0..cfg.days).map(|d| DayProfile::draw(&mut rng, d)).collect();

    let interval_h = cfg.interval_minutes as f64 / 60.0;
    let substeps = (interval_h / (0.9 * c.cfl_limit())).ceil().max(1.0) as usize;
    let dt = interval_h / substeps as f64;
    let per_hour = (60 / cfg.interval_minutes) as usize;
    let samples = hours * per_hour;

    let mut rho = vec![0.08 * c.rho_max; c.cells];
    // spin up over one day so the first samples are not an artificial state
    let spin = &profiles[0];
    for k in 0..24 * per_hour * substeps {
        let h = k as f64 * dt;
        let (up, down) = spin.ghosts(h % 24.0, c.rho_max);
        rho = c.step(&rho, dt, 1.0, Boundary::InflowOutflow { upstream: up, downstream: down });
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| SimError::BadCorridor(e.to_string()))?;
    let n = sensor_cells.len();
    let mut density = Vec::with_capacity(samples * c.cells);
    let mut fspd_factor = Vec::with_capacity(samples);
    let mut values = Vec::with_capacity(samples * n);
    for s in 0..samples {
        let hour = s / per_hour;
        let factor = if rain[hour] { cfg.weather.rain_factor } else { 1.0 };
        density.extend_from_slice(&rho);
        fspd_factor.push(factor);
        for &cell in &sensor_cells {
            let speed = c.x_fspd[cell] * factor * (1.0 - rho[cell] / c.rho_max);
            let v = if cfg.noise_std > 0.0 {
                (speed + noise.sample(&mut rng)).max(0.0)
            } else {
                speed
            };
            values.push(v);
        }
        let prof = &profiles[hour / 24];
        for k in 0..substeps {
            let h = (s as f64 + k as f64 / substeps as f64) * interval_h;
            let (up, down) = prof.ghosts(h % 24.0, c.rho_max);
            rho = c.step(&rho, dt, factor, Boundary::InflowOutflow { upstream: up, downstream: down });
        }
    }

    let proj = Projection::at(cfg.origin);
    let b = cfg.bearing_deg.to_radians();
    let (along, across) = ([b.sin(), b.cos()], [b.cos(), -b.sin()]);
    let place = |s: f64| {
        let w = cfg.meander_km * (0.9 * s).sin();
        [along[0] * s + across[0] * w, along[1] * s + across[1] * w]
    };
    let sensors: Vec<Sensor> = cfg
        .sensor_positions
        .iter()
        .enumerate()
        .map(|(i, &s)| Sensor {
            node_id: format!("s{i:03}"),
            coord: proj.unproject(place(s)),
        })
        .collect();

    let timestamps: Vec<NaiveDateTime> = (0..samples)
        .map(|s| cfg.start + Duration::minutes(s as i64 * cfg.interval_minutes as i64))
        .collect();
    let traffic = TrafficTensor {
        timestamps,
        node_ids: sensors.iter().map(|s| s.node_id.clone()).collect(),
        channels: 1,
        values,
        mask: vec![true; samples * n],
        interval_minutes: cfg.interval_minutes,
    };
    let weather = weather_table(cfg, &proj, place(0.0), place(c.length), &rain, &mut rng);
    Ok(SynthData {
        sensors,
        sensor_cells,
        traffic,
        weather,
        density,
        fspd_factor,
        rain,
        cells: c.cells,
    })
}

/// Hours of weather recorded before the first traffic sample.
pub const WEATHER_LEAD_HOURS: usize = 12;

fn weather_table<R: Rng>(
    cfg: &SynthConfig,
    proj: &Projection,
    a: [f64; 2],
    b: [f64; 2],
    rain: &[bool],
    rng: &mut R,
) -> WeatherTable {
    let sp = cfg.station_spacing_km.max(1.0);
    let (x0, x1) = (a[0].min(b[0]) - sp / 2.0, a[0].max(b[0]) + sp / 2.0);
    let (y0, y1) = (a[1].min(b[1]) - sp / 2.0, a[1].max(b[1]) + sp / 2.0);
    let nx = ((x1 - x0) / sp).ceil().max(1.0) as usize;
    let ny = ((y1 - y0) / sp).ceil().max(1.0) as usize;
    let mut stations = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let xy = [x0 + (i as f64 + 0.5) * sp, y0 + (j as f64 + 0.5) * sp];
            stations.push(Station {
                id: format!("w{:02}", stations.len()),
                coord: proj.unproject(xy),
            });
        }
    }
    let offsets: Vec<f64> = stations.iter().map(|_| rng.gen_range(-0.8..0.8)).collect();
    let total = rain.len() + WEATHER_LEAD_HOURS;
    let day_temp: Vec<f64> = (0..total / 24 + 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let nw = stations.len();
    let mut values = Vec::with_capacity(total * nw * 4);
    let mut runoff = vec![0.0; nw];
    for k in 0..total {
        let hour = k as i64 - WEATHER_LEAD_HOURS as i64;
        let hod = hour.rem_euclid(24) as f64;
        let raining = hour >= 0 && rain[hour as usize];
        let day = (k / 24).min(day_temp.len() - 1);
        for j in 0..nw {
            let temp = 283.0 + 6.0 * (2.0 * std::f64::consts::PI * (hod - 9.0) / 24.0).sin()
                + day_temp[day]
                + offsets[j]
                - if raining { 2.0 } else { 0.0 };
            let sun = (std::f64::consts::PI * (hod - 6.0) / 12.0).sin().max(0.0) * 2.5e6;
            let ssr = if raining { 0.3 * sun } else { sun };
            let tp = if raining { 0.002 + rng.gen_range(0.0..0.002) } else { 0.0 };
            runoff[j] = 0.5 * runoff[j] + 0.3 * tp;
            values.extend_from_slice(&[temp, ssr, runoff[j], tp]);
        }
    }
    let first = cfg.start - Duration::hours(WEATHER_LEAD_HOURS as i64);
    WeatherTable {
        stations,
        timestamps: (0..total).map(|k| first + Duration::hours(k as i64)).collect(),
        values: Tensor::new(vec![total, nw, 4], values).expect("shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_of_a_week_at_five_minutes() {
        let mut cfg = SynthConfig::corridor(20, 7, 5);
        cfg.weather.random_episode_prob = 0.0;
        let d = synth_dataset(&cfg).unwrap();
        assert_eq!(d.traffic.steps(), 2016);
        assert_eq!(d.traffic.nodes(), 20);
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("observations.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2017);
        assert_eq!(lines[1].split(',').count(), 21);
    }

    #[test]
    fn noiseless_speeds_follow_greenshields() {
        let mut cfg = SynthConfig::corridor(6, 1, 15);
        cfg.weather.rain_hours = vec![(10, 12)];
        cfg.weather.random_episode_prob = 0.0;
        let d = synth_dataset(&cfg).unwrap();
        let c = &cfg.corridor;
        for t in 0..d.traffic.steps() {
            let hour = t / 4;
            let factor = if (10..12).contains(&hour) { 0.8 } else { 1.0 };
            assert_eq!(d.fspd_factor[t], factor);
            for (n, &cell) in d.sensor_cells.iter().enumerate() {
                let rho = d.density[t * c.cells + cell];
                let expect = super::super::greenshields_speed(rho, c.rho_max, c.x_fspd[cell] * factor).unwrap();
                assert_eq!(d.traffic.get(t, n, 0), expect);
            }
        }
    }

    #[test]
    fn sensor_outside_corridor() {
        let mut cfg = SynthConfig::corridor(3, 1, 15);
        cfg.sensor_positions[1] = 25.0;
        assert_eq!(synth_dataset(&cfg).unwrap_err(), SimError::SensorOutOfCorridor(25.0));
    }

    #[test]
    fn weather_covers_lead_window_and_marks_rain() {
        let mut cfg = SynthConfig::corridor(4, 2, 15);
        cfg.weather.rain_hours = vec![(10, 12)];
        cfg.weather.random_episode_prob = 0.0;
        let d = synth_dataset(&cfg).unwrap();
        assert_eq!(d.weather.hours(), 48 + WEATHER_LEAD_HOURS);
        let tp = |h: usize| d.weather.values.at3(h + WEATHER_LEAD_HOURS, 0, 3);
        assert!(tp(10) > 0.0 && tp(11) > 0.0);
        assert_eq!(tp(9), 0.0);
        assert_eq!(tp(12), 0.0);
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig::corridor(5, 1, 15);
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a.traffic, b.traffic);
        assert_eq!(a.weather, b.weather);
    }
}
