use serde::{Deserialize, Serialize};

use super::RegionError;
use crate::geo::{LatLon, Projection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Cut along latitude.
    Horizontal,
    /// Cut along longitude.
    Vertical,
    /// Unobserved core enclosed by an observed ring.
    Ring,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "horizontal" => Ok(Self::Horizontal),
            "vertical" => Ok(Self::Vertical),
            "ring" => Ok(Self::Ring),
            other => Err(format!("unknown split mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub mirrored: bool,
    pub ratios: (f64, f64, f64),
    pub labels: Vec<SplitLabel>,
}

impl SplitSpec {
    pub fn count(&self, label: SplitLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

pub fn split_region(
    coords: &[LatLon],
    mode: SplitMode,
    ratios: (f64, f64, f64),
) -> Result<SplitSpec, RegionError> {
    split_region_oriented(coords, mode, ratios, false)
}

/// Deterministic geometric split. With `mirrored` the sort order is
/// reversed, so the unobserved block sits on the opposite side of the cut
/// (ring splits ignore the flag).
pub fn split_region_oriented(
    coords: &[LatLon],
    mode: SplitMode,
    ratios: (f64, f64, f64),
    mirrored: bool,
) -> Result<SplitSpec, RegionError> {
    let n = coords.len();
    if n < 3 {
        return Err(RegionError::TooFewNodes(n));
    }
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(RegionError::BadRatios);
    }
    let total = tr + va + te;
    let n_test = ((n as f64 * te / total).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * va / total).round() as usize).clamp(1, n - 1 - n_test);

    let mut order: Vec<usize> = (0..n).collect();
    let mut labels = vec![SplitLabel::Train; n];
    match mode {
        SplitMode::Horizontal | SplitMode::Vertical => {
            let key = |i: usize| match mode {
                SplitMode::Horizontal => coords[i].lat,
                _ => coords[i].lon,
            };
            order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
            if mirrored {
                order.reverse();
            }
            // ascending: train block, then val, then test
            let n_train = n - n_val - n_test;
            for (rank, &i) in order.iter().enumerate() {
                labels[i] = if rank < n_train {
                    SplitLabel::Train
                } else if rank < n_train + n_val {
                    SplitLabel::Val
                } else {
                    SplitLabel::Test
                };
            }
        }
        SplitMode::Ring => {
            let pos = Projection::centred(coords).project_all(coords);
            let r = |i: usize| pos[i][0].hypot(pos[i][1]);
            order.sort_by(|&a, &b| r(a).total_cmp(&r(b)).then(a.cmp(&b)));
            for (rank, &i) in order.iter().enumerate() {
                labels[i] = if rank < n_test {
                    SplitLabel::Test
                } else if rank < n_test + n_val {
                    SplitLabel::Val
                } else {
                    SplitLabel::Train
                };
            }
        }
    }
    Ok(SplitSpec {
        mode,
        mirrored,
        ratios,
        labels,
    })
}
