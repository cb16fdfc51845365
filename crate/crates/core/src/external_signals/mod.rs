//! Weather ingestion, station matching, cross-attention and gated fusion.

mod weather;

pub use weather::{read_weather, write_weather, Station, WeatherStats, WeatherTable, WEATHER_FIELDS};

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{Tape, Var};
use crate::geo::{euclid, LatLon, Projection};
use crate::layout::swap_major;
use crate::params::{Bound, Linear, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("no weather stations")]
    NoStations,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("station {station}: gap of {hours} h exceeds the 3 h limit")]
    GapTooLarge { station: String, hours: i64 },
    #[error("{0}")]
    Data(String),
}

/// Nearest station per sensor by planar distance; ties go to the lower index.
pub fn match_weather(sensors: &[LatLon], stations: &[LatLon]) -> Result<Vec<usize>, SignalError> {
    if stations.is_empty() {
        return Err(SignalError::NoStations);
    }
    let mut all: Vec<LatLon> = sensors.to_vec();
    all.extend_from_slice(stations);
    let proj = Projection::centred(&all);
    let st: Vec<[f64; 2]> = proj.project_all(stations);
    Ok(sensors
        .iter()
        .map(|&s| {
            let p = proj.project(s);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, &q) in st.iter().enumerate() {
                let d = euclid(p, q);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

/// Single-head attention from traffic steps to weather steps, per node.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub hidden: usize,
    pub weather_channels: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, hidden: usize, weather_channels: usize) -> Self {
        Self {
            q: Linear::new(store, rng, "weather.q", hidden, hidden, false),
            k: Linear::new(store, rng, "weather.k", weather_channels, hidden, false),
            v: Linear::new(store, rng, "weather.v", weather_channels, hidden, true),
            hidden,
            weather_channels,
        }
    }

    /// Returns `H_wx` as `[T, N, D]` and the weights as `[N, T, T_w]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h0: Var, x_wx: Var) -> Result<(Var, Var), SignalError> {
        let hs = tape.shape(h0).to_vec();
        let ws = tape.shape(x_wx).to_vec();
        if hs.len() != 3 || ws.len() != 3 || hs[1] != ws[1] || hs[2] != self.hidden || ws[2] != self.weather_channels {
            return Err(SignalError::ShapeMismatch(format!("traffic {hs:?} vs weather {ws:?}")));
        }
        let (t, n, d) = (hs[0], hs[1], hs[2]);
        let tw = ws[0];
        let h_flat = tape.reshape(h0, &[t * n, d]);
        let h_nm = tape.gather_rows(h_flat, swap_major(t, n));
        let w_flat = tape.reshape(x_wx, &[tw * n, self.weather_channels]);
        let w_nm = tape.gather_rows(w_flat, swap_major(tw, n));
        let q = self.q.forward(tape, p, h_nm);
        let k = self.k.forward(tape, p, w_nm);
        let v = self.v.forward(tape, p, w_nm);
        let q = tape.reshape(q, &[n, t, d]);
        let k = tape.reshape(k, &[n, tw, d]);
        let v = tape.reshape(v, &[n, tw, d]);
        let scores = tape.batch_matmul(q, k, true);
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let alpha = tape.softmax_rows(scores);
        let ctx = tape.batch_matmul(alpha, v, false);
        let ctx = tape.reshape(ctx, &[n * t, d]);
        let ctx = tape.gather_rows(ctx, swap_major(n, t));
        Ok((tape.reshape(ctx, &[t, n, d]), alpha))
    }
}

/// `ReLU(FC_h(z⊙H0 + (1−z)⊙H_wx))` with `z = σ(FC_s(H0) + FC_t(H_wx))`.
#[derive(Clone, Copy, Debug)]
pub struct GatedFusion {
    pub fc_s: Linear,
    pub fc_t: Linear,
    pub fc_h: Linear,
}

impl GatedFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, hidden: usize) -> Self {
        Self {
            fc_s: Linear::new(store, rng, "fusion.s", hidden, hidden, true),
            fc_t: Linear::new(store, rng, "fusion.t", hidden, hidden, false),
            fc_h: Linear::new(store, rng, "fusion.h", hidden, hidden, true),
        }
    }

    pub fn gate(&self, tape: &mut Tape, p: &Bound, h0: Var, h_wx: Var) -> Var {
        let a = self.fc_s.forward(tape, p, h0);
        let b = self.fc_t.forward(tape, p, h_wx);
        let s = tape.add(a, b);
        tape.sigmoid(s)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h0: Var, h_wx: Var) -> Result<Var, SignalError> {
        if tape.shape(h0) != tape.shape(h_wx) {
            return Err(SignalError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                tape.shape(h0),
                tape.shape(h_wx)
            )));
        }
        let z = self.gate(tape, p, h0, h_wx);
        let a = tape.mul(z, h0);
        let neg = tape.scale(z, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let b = tape.mul(one_minus, h_wx);
        let mix = tape.add(a, b);
        let out = self.fc_h.forward(tape, p, mix);
        Ok(tape.relu(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matching_examples() {
        let stations = [LatLon::new(0.0, 0.0), LatLon::new(0.0, 0.1), LatLon::new(0.1, 0.0)];
        assert_eq!(match_weather(&[LatLon::new(0.1, 0.0)], &stations).unwrap(), vec![2]);
        // 3 units vs 5 units away
        let st = [LatLon::new(0.0, 0.05), LatLon::new(0.0, -0.03)];
        assert_eq!(match_weather(&[LatLon::new(0.0, 0.0)], &st).unwrap(), vec![1]);
        let tie = [LatLon::new(0.0, 0.02), LatLon::new(0.0, -0.02)];
        assert_eq!(match_weather(&[LatLon::new(0.0, 0.0)], &tie).unwrap(), vec![0]);
        assert_eq!(match_weather(&[LatLon::new(0.0, 0.0)], &[]), Err(SignalError::NoStations));
    }

    fn setup() -> (ParamStore, CrossAttention, GatedFusion) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let att = CrossAttention::new(&mut store, &mut rng, 4, 3);
        let fus = GatedFusion::new(&mut store, &mut rng, 4);
        (store, att, fus)
    }

    #[test]
    fn attention_rows_normalised() {
        let (store, att, _) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = tape.constant(Tensor::from_fn(&[5, 2, 4], |i| (i as f64 * 0.37).sin() * 3.0));
        let w = tape.constant(Tensor::from_fn(&[7, 2, 3], |i| (i as f64 * 0.91).cos() * 2.0));
        let (out, alpha) = att.forward(&mut tape, &p, h, w).unwrap();
        assert_eq!(tape.shape(out), &[5, 2, 4]);
        assert_eq!(tape.shape(alpha), &[2, 5, 7]);
        for row in tape.value(alpha).data().chunks(7) {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_and_uniform_windows() {
        let (store, att, _) = setup();
        let wv = store.get(att.v.w).clone();
        let bv = store.get(att.v.b.unwrap()).clone();
        let value_of = |x: &[f64]| -> Vec<f64> {
            (0..4)
                .map(|d| bv.data()[d] + (0..3).map(|c| x[c] * wv.at2(c, d)).sum::<f64>())
                .collect()
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = tape.constant(Tensor::from_fn(&[3, 1, 4], |i| i as f64));
        let w = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0]).reshaped(&[1, 1, 3]).unwrap());
        let (out, _) = att.forward(&mut tape, &p, h, w).unwrap();
        let v = value_of(&[0.5, -1.0, 2.0]);
        for t in 0..3 {
            for d in 0..4 {
                assert!((tape.value(out).data()[t * 4 + d] - v[d]).abs() < 1e-12);
            }
        }

        // identical keys: zeroing the key projection gives uniform weights
        let mut store = store.clone();
        att.k.zero(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = tape.constant(Tensor::from_fn(&[2, 1, 4], |i| i as f64));
        let xs = [[1.0, 0.0, 2.0], [3.0, 1.0, -1.0]];
        let w = tape.constant(Tensor::new(vec![2, 1, 3], xs.concat()).unwrap());
        let (out, alpha) = att.forward(&mut tape, &p, h, w).unwrap();
        assert!(tape.value(alpha).data().iter().all(|&a| (a - 0.5).abs() < 1e-12));
        let (v0, v1) = (value_of(&xs[0]), value_of(&xs[1]));
        for d in 0..4 {
            assert!((tape.value(out).data()[d] - 0.5 * (v0[d] + v1[d])).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_examples() {
        let (mut store, _, fus) = setup();
        let hv = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.5).sin());
        let wv = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.3).cos());
        let relu_fc_h = |store: &ParamStore, x: &Tensor| -> Vec<f64> {
            let w = store.get(fus.fc_h.w);
            let b = store.get(fus.fc_h.b.unwrap());
            x.data()
                .chunks(4)
                .flat_map(|r| {
                    (0..4)
                        .map(|d| (b.data()[d] + (0..4).map(|c| r[c] * w.at2(c, d)).sum::<f64>()).max(0.0))
                        .collect::<Vec<_>>()
                })
                .collect()
        };

        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = tape.constant(hv.clone());
        let out = fus.forward(&mut tape, &p, h, h).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(relu_fc_h(&store, &hv)) {
            assert!((a - b).abs() < 1e-12);
        }

        fus.fc_s.zero(&mut store);
        fus.fc_t.zero(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = tape.constant(hv.clone());
        let w = tape.constant(wv.clone());
        let z = fus.gate(&mut tape, &p, h, w);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.5));
        let out = fus.forward(&mut tape, &p, h, w).unwrap();
        assert_eq!(tape.shape(out), &[2, 3, 4]);
        let mid = Tensor::from_fn(&[2, 3, 4], |i| 0.5 * hv.data()[i] + 0.5 * wv.data()[i]);
        for (a, b) in tape.value(out).data().iter().zip(relu_fc_h(&store, &mid)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_strictly_inside_unit_interval() {
        let (store, _, fus) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = tape.constant(Tensor::from_fn(&[4, 2, 4], |i| (i as f64 - 16.0) * 0.7));
        let w = tape.constant(Tensor::from_fn(&[4, 2, 4], |i| (i as f64 * 1.3).sin() * 5.0));
        let z = fus.gate(&mut tape, &p, h, w);
        assert!(tape.value(z).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fusion_monotone_in_gate() {
        let (mut store, _, fus) = setup();
        fus.fc_s.zero(&mut store);
        fus.fc_t.zero(&mut store);
        fus.fc_h.set_identity(&mut store);
        let hv = Tensor::from_fn(&[2, 2, 4], |i| 1.0 + (i as f64 * 0.4).sin());
        let wv = Tensor::from_fn(&[2, 2, 4], |i| hv.data()[i] - 0.5 - (i % 3) as f64);
        let mut prev: Option<Vec<f64>> = None;
        for k in -4..=4 {
            let b = fus.fc_s.b.unwrap();
            store.get_mut(b).data_mut().fill(k as f64);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let h = tape.constant(hv.clone());
            let w = tape.constant(wv.clone());
            let out = fus.forward(&mut tape, &p, h, w).unwrap();
            let cur = tape.value(out).data().to_vec();
            if let Some(prev) = &prev {
                assert!(cur.iter().zip(prev).all(|(c, p)| c >= p));
            }
            prev = Some(cur);
        }
    }
}
