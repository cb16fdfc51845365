use std::collections::BTreeSet;

use rand::Rng;

use super::{Adjacency, RegionError};
use crate::diffcore::Tensor;
use crate::geo::euclid;

/// Random sub-graph masking: repeatedly draw an unmasked observed node and
/// mask it together with its observed 1-hop neighbours until at least
/// `ceil(|observed|·ratio)` nodes are masked.
pub fn random_subgraph_mask<R: Rng + ?Sized>(
    a_sg: &Adjacency,
    observed: &[usize],
    ratio: f64,
    rng: &mut R,
) -> BTreeSet<usize> {
    let target = ((observed.len() as f64) * ratio.clamp(0.0, 1.0)).ceil() as usize;
    let observed_set: BTreeSet<usize> = observed.iter().copied().collect();
    let mut mask = BTreeSet::new();
    while mask.len() < target {
        let remaining: Vec<usize> = observed
            .iter()
            .copied()
            .filter(|i| !mask.contains(i))
            .collect();
        let pick = remaining[rng.gen_range(0..remaining.len())];
        mask.insert(pick);
        for j in a_sg.in_neighbours(pick) {
            if observed_set.contains(&j) {
                mask.insert(j);
            }
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdwOptions {
    pub k: usize,
    pub power: f64,
    /// Neighbours farther than this (km) are ignored; `None` keeps all.
    pub radius: Option<f64>,
}

impl Default for IdwOptions {
    fn default() -> Self {
        Self {
            k: 3,
            power: 2.0,
            radius: None,
        }
    }
}

const COINCIDENT: f64 = 1e-9;

/// Inverse-distance weights over the `k` nearest sources of `target`.
pub(crate) fn idw_weights(
    positions: &[[f64; 2]],
    target: usize,
    sources: &[usize],
    opts: &IdwOptions,
) -> Vec<(usize, f64)> {
    let mut cands: Vec<(f64, usize)> = sources
        .iter()
        .filter(|&&s| s != target)
        .map(|&s| (euclid(positions[target], positions[s]), s))
        .filter(|(d, _)| opts.radius.map_or(true, |r| *d <= r))
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands.truncate(opts.k);
    let raw: Vec<(usize, f64)> = cands
        .iter()
        .map(|&(d, s)| (s, 1.0 / d.max(COINCIDENT).powf(opts.power)))
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(s, w)| (s, w / total)).collect()
}

/// Replaces the series of every masked node in `values` (`[T, N, C]`) by an
/// inverse-distance-weighted blend of its nearest unmasked sources. When no
/// source is within range, the per-time mean of all sources is used.
pub fn pseudo_observations(
    values: &Tensor,
    positions: &[[f64; 2]],
    masked: &[usize],
    sources: &[usize],
    opts: &IdwOptions,
) -> Result<Tensor, RegionError> {
    if sources.is_empty() {
        return Err(RegionError::NoObservedNodes);
    }
    let shape = values.shape();
    let (t_len, n, c) = (shape[0], shape[1], shape.get(2).copied().unwrap_or(1));
    let mut out = values.clone();
    let at = |t: usize, i: usize, ch: usize| (t * n + i) * c + ch;
    for &m in masked {
        let weights = idw_weights(positions, m, sources, opts);
        for t in 0..t_len {
            for ch in 0..c {
                let v = if weights.is_empty() {
                    sources.iter().map(|&s| values.data()[at(t, s, ch)]).sum::<f64>()
                        / sources.len() as f64
                } else {
                    weights
                        .iter()
                        .map(|&(s, w)| w * values.data()[at(t, s, ch)])
                        .sum()
                };
                out.data_mut()[at(t, m, ch)] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_graph(n: usize) -> Adjacency {
        let mut a = Adjacency::identity(n);
        for i in 1..n {
            a.set(i, i - 1, 1.0);
            a.set(i - 1, i, 1.0);
        }
        a
    }

    #[test]
    fn mask_ratio_extremes() {
        let a = path_graph(10);
        let obs: Vec<usize> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(random_subgraph_mask(&a, &obs, 0.0, &mut rng).is_empty());
        assert_eq!(random_subgraph_mask(&a, &obs, 1.0, &mut rng).len(), 10);
    }

    #[test]
    fn mask_overshoot_bounded_by_degree() {
        let a = path_graph(10);
        let obs: Vec<usize> = (0..10).collect();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_subgraph_mask(&a, &obs, 0.5, &mut rng);
            assert!((5..=7).contains(&m.len()), "seed {seed}: {}", m.len());
        }
    }

    #[test]
    fn mask_reproducible_from_seed() {
        let a = path_graph(12);
        let obs: Vec<usize> = (0..12).collect();
        let run = |s| random_subgraph_mask(&a, &obs, 0.4, &mut ChaCha8Rng::seed_from_u64(s));
        assert_eq!(run(9), run(9));
    }

    fn series(vals: &[f64], t_len: usize) -> Tensor {
        let n = vals.len();
        Tensor::from_fn(&[t_len, n, 1], |i| vals[i % n])
    }

    #[test]
    fn idw_symmetric_pair() {
        let pos = [[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]];
        let x = series(&[4.0, 6.0, 0.0], 3);
        let out = pseudo_observations(&x, &pos, &[2], &[0, 1], &IdwOptions::default()).unwrap();
        for t in 0..3 {
            assert!((out.at3(t, 2, 0) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn idw_coincident_neighbour_dominates() {
        let pos = [[0.0, 0.0], [3.0, 0.0], [0.0, 0.0]];
        let x = series(&[7.0, 100.0, 0.0], 2);
        let out = pseudo_observations(&x, &pos, &[2], &[0, 1], &IdwOptions::default()).unwrap();
        assert!((out.at3(0, 2, 0) - 7.0).abs() < 1e-6);
    }

    #[test]
    fn idw_hand_evaluated() {
        // neighbours at 1, 2, 2 with values 10, 4, 4 and a farther one ignored
        let pos = [[1.0, 0.0], [0.0, 2.0], [-2.0, 0.0], [9.0, 9.0], [0.0, 0.0]];
        let x = series(&[10.0, 4.0, 4.0, 1000.0, 0.0], 1);
        let out =
            pseudo_observations(&x, &pos, &[4], &[0, 1, 2, 3], &IdwOptions::default()).unwrap();
        assert!((out.at3(0, 4, 0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn idw_falls_back_to_mean_outside_radius() {
        let pos = [[0.0, 0.0], [1.0, 0.0], [50.0, 0.0]];
        let x = series(&[2.0, 4.0, 0.0], 1);
        let opts = IdwOptions {
            radius: Some(5.0),
            ..IdwOptions::default()
        };
        let out = pseudo_observations(&x, &pos, &[2], &[0, 1], &opts).unwrap();
        assert_eq!(out.at3(0, 2, 0), 3.0);
    }

    #[test]
    fn idw_requires_sources() {
        let x = series(&[1.0, 2.0], 1);
        assert_eq!(
            pseudo_observations(&x, &[[0.0, 0.0], [1.0, 0.0]], &[0], &[], &IdwOptions::default()),
            Err(RegionError::NoObservedNodes)
        );
    }
}
