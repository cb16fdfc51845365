use super::{Adjacency, RegionError};
use crate::geo::nearest_rank;

/// Non-peak windows: 09:00–16:00, 22:00–24:00 and 00:00–06:00.
pub fn is_non_peak(minute_of_day: u32) -> bool {
    let m = minute_of_day % 1440;
    (540..960).contains(&m) || m >= 1320 || m < 360
}

/// Nearest-rank 85th percentile of the non-peak samples of one node.
pub fn estimate_free_flow_speed(
    node_id: &str,
    speeds: &[f64],
    minute_of_day: &[u32],
) -> Result<f64, RegionError> {
    let mut samples: Vec<f64> = speeds
        .iter()
        .zip(minute_of_day)
        .filter(|(v, &m)| is_non_peak(m) && v.is_finite())
        .map(|(&v, _)| v)
        .collect();
    samples.sort_by(f64::total_cmp);
    nearest_rank(&samples, 0.85).ok_or_else(|| RegionError::NoNonPeakSamples(node_id.to_string()))
}

/// Fills `fspd[t]` for each target with the mean over its in-neighbours in
/// `a_dtw`.
pub fn propagate_free_flow(fspd: &mut [f64], a_dtw: &Adjacency, targets: &[usize]) {
    for &t in targets {
        let nb = a_dtw.in_neighbours(t);
        if !nb.is_empty() {
            fspd[t] = nb.iter().map(|&j| fspd[j]).sum::<f64>() / nb.len() as f64;
        }
    }
}
