//! Planar projection of geographic coordinates.

use serde::{Deserialize, Serialize};

const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Latitude/longitude in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Equirectangular projection anchored at a reference latitude/longitude.
///
/// Outputs kilometres east (`x`) and north (`y`) of the anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    origin: LatLon,
    cos_lat: f64,
}

impl Projection {
    pub fn at(origin: LatLon) -> Self {
        Self {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    /// Projection anchored at the coordinate centroid.
    pub fn centred(coords: &[LatLon]) -> Self {
        Self::at(centroid(coords))
    }

    pub fn project(&self, p: LatLon) -> [f64; 2] {
        let x = (p.lon - self.origin.lon).to_radians() * self.cos_lat * EARTH_RADIUS_KM;
        let y = (p.lat - self.origin.lat).to_radians() * EARTH_RADIUS_KM;
        [x, y]
    }

    pub fn project_all(&self, coords: &[LatLon]) -> Vec<[f64; 2]> {
        coords.iter().map(|&c| self.project(c)).collect()
    }

    /// Inverse of [`Projection::project`].
    pub fn unproject(&self, xy: [f64; 2]) -> LatLon {
        let lon = self.origin.lon + (xy[0] / (self.cos_lat * EARTH_RADIUS_KM)).to_degrees();
        let lat = self.origin.lat + (xy[1] / EARTH_RADIUS_KM).to_degrees();
        LatLon { lat, lon }
    }
}

pub fn centroid(coords: &[LatLon]) -> LatLon {
    if coords.is_empty() {
        return LatLon::new(0.0, 0.0);
    }
    let n = coords.len() as f64;
    LatLon {
        lat: coords.iter().map(|c| c.lat).sum::<f64>() / n,
        lon: coords.iter().map(|c| c.lon).sum::<f64>() / n,
    }
}

pub fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Nearest-rank quantile of already sorted values: the element at 1-based
/// rank `ceil(q·n)`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    // guard against q·n landing a few ulps above an integer
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Some(sorted[rank.min(n) - 1])
}
