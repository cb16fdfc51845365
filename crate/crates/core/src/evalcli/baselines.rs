use super::EvalError;
use crate::diffcore::Tensor;
use crate::region_graph::IdwOptions;

/// `(source, weight)` pairs for each target: inverse-distance weights over
/// the `k` nearest observed nodes; a coincident source takes all weight.
fn idw_table(positions: &[[f64; 2]], observed: &[usize], targets: &[usize], opts: &IdwOptions) -> Vec<Vec<(usize, f64)>> {
    targets
        .iter()
        .map(|&t| {
            let mut d: Vec<(f64, usize)> = observed
                .iter()
                .map(|&s| {
                    let (dx, dy) = (positions[s][0] - positions[t][0], positions[s][1] - positions[t][1]);
                    ((dx * dx + dy * dy).sqrt(), s)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(opts.k.max(1));
            if let Some(&(_, s)) = d.iter().find(|(dist, _)| *dist < 1e-9) {
                return vec![(s, 1.0)];
            }
            let w: Vec<f64> = d.iter().map(|(dist, _)| dist.powf(-opts.power)).collect();
            let total: f64 = w.iter().sum();
            d.iter().zip(w).map(|(&(_, s), wi)| (s, wi / total)).collect()
        })
        .collect()
}

/// Per-(node, step-of-day) means over the training range; unobserved nodes
/// take the IDW blend of observed profiles.
#[derive(Clone, Debug)]
pub struct HistoricalAverage {
    /// `[steps_per_day, targets, C]`.
    profiles: Tensor,
    targets: Vec<usize>,
}

impl HistoricalAverage {
    /// `values` is `[T, N, C]` in observation units.
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        values: &Tensor,
        step_of_day: &[usize],
        steps_per_day: usize,
        train_end: usize,
        positions: &[[f64; 2]],
        observed: &[usize],
        targets: &[usize],
        opts: &IdwOptions,
    ) -> Result<Self, EvalError> {
        if observed.is_empty() {
            return Err(EvalError::NoObservedNodes);
        }
        let shape = values.shape();
        let (n, c) = (shape[1], shape[2]);
        let mut sum = vec![0.0; steps_per_day * n * c];
        let mut count = vec![0usize; steps_per_day];
        for t in 0..train_end.min(shape[0]) {
            let s = step_of_day[t];
            count[s] += 1;
            for &i in observed {
                for ch in 0..c {
                    sum[(s * n + i) * c + ch] += values.data()[(t * n + i) * c + ch];
                }
            }
        }
        // Slots never seen in training fall back to the mean over seen slots.
        let seen: Vec<usize> = (0..steps_per_day).filter(|&s| count[s] > 0).collect();
        let mean_of = |s: usize, i: usize, ch: usize| -> f64 {
            if count[s] > 0 {
                sum[(s * n + i) * c + ch] / count[s] as f64
            } else {
                seen.iter().map(|&q| sum[(q * n + i) * c + ch] / count[q] as f64).sum::<f64>() / seen.len().max(1) as f64
            }
        };
        let weights = idw_table(positions, observed, targets, opts);
        let mut profiles = Tensor::zeros(&[steps_per_day, targets.len(), c]);
        for s in 0..steps_per_day {
            for (ti, w) in weights.iter().enumerate() {
                for ch in 0..c {
                    profiles.data_mut()[(s * targets.len() + ti) * c + ch] =
                        w.iter().map(|&(src, wi)| wi * mean_of(s, src, ch)).sum();
                }
            }
        }
        Ok(Self {
            profiles,
            targets: targets.to_vec(),
        })
    }

    /// Forecast `[T', targets, C]` for the steps `first..first + horizon`.
    pub fn forecast(&self, step_of_day: &[usize], first: usize, horizon: usize) -> Tensor {
        let shape = self.profiles.shape();
        let (m, c) = (shape[1], shape[2]);
        let mut out = Vec::with_capacity(horizon * m * c);
        for h in 0..horizon {
            let s = step_of_day[first + h];
            out.extend_from_slice(&self.profiles.data()[s * m * c..(s + 1) * m * c]);
        }
        Tensor::new(vec![horizon, m, c], out).expect("shape")
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }
}

/// IDW blend of the observed nodes' last input values, held for the horizon.
#[derive(Clone, Debug)]
pub struct IdwPersistence {
    weights: Vec<Vec<(usize, f64)>>,
}

impl IdwPersistence {
    pub fn new(positions: &[[f64; 2]], observed: &[usize], targets: &[usize], opts: &IdwOptions) -> Result<Self, EvalError> {
        if observed.is_empty() {
            return Err(EvalError::NoObservedNodes);
        }
        Ok(Self {
            weights: idw_table(positions, observed, targets, opts),
        })
    }

    /// `values` is `[T, N, C]`; the last observed step is `last`.
    pub fn forecast(&self, values: &Tensor, last: usize, horizon: usize) -> Tensor {
        let shape = values.shape();
        let (n, c) = (shape[1], shape[2]);
        let m = self.weights.len();
        let mut row = vec![0.0; m * c];
        for (ti, w) in self.weights.iter().enumerate() {
            for ch in 0..c {
                row[ti * c + ch] = w
                    .iter()
                    .map(|&(s, wi)| wi * values.data()[(last * n + s) * c + ch])
                    .sum();
            }
        }
        let data = (0..horizon).flat_map(|_| row.iter().copied()).collect();
        Tensor::new(vec![horizon, m, c], data).expect("shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> IdwOptions {
        IdwOptions::default()
    }

    #[test]
    fn single_observed_node_is_copied() {
        let pos = [[0.0, 0.0], [3.0, 4.0], [-1.0, 2.0]];
        let values = Tensor::new(vec![2, 3, 1], vec![1.0, 0.0, 0.0, 7.5, 0.0, 0.0]).unwrap();
        let f = IdwPersistence::new(&pos, &[0], &[1, 2], &opts()).unwrap();
        let out = f.forecast(&values, 1, 3);
        assert_eq!(out.shape(), &[3, 2, 1]);
        assert!(out.data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn equidistant_sources_average() {
        let pos = [[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]];
        let values = Tensor::new(vec![1, 3, 1], vec![10.0, 20.0, 0.0]).unwrap();
        let f = IdwPersistence::new(&pos, &[0, 1], &[2], &opts()).unwrap();
        assert!((f.forecast(&values, 0, 1).data()[0] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn no_observed_nodes() {
        let pos = [[0.0, 0.0]];
        assert_eq!(IdwPersistence::new(&pos, &[], &[0], &opts()).unwrap_err(), EvalError::NoObservedNodes);
        let v = Tensor::zeros(&[1, 1, 1]);
        assert!(HistoricalAverage::fit(&v, &[0], 1, 1, &pos, &[], &[0], &opts()).is_err());
    }

    #[test]
    fn periodic_signal_is_recovered() {
        let spd = 24;
        let days = 6;
        let n = 3;
        let pos = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let sod: Vec<usize> = (0..spd * days).map(|t| t % spd).collect();
        let f = |t: usize| 50.0 + 10.0 * (2.0 * std::f64::consts::PI * (t % spd) as f64 / spd as f64).sin();
        let values = Tensor::from_fn(&[spd * days, n, 1], |i| f(i / n));
        let ha = HistoricalAverage::fit(&values, &sod, spd, spd * 4, &pos, &[0, 2], &[1], &opts()).unwrap();
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for first in spd * 4..spd * days - 4 {
            let out = ha.forecast(&sod, first, 4);
            for h in 0..4 {
                p.push(out.data()[h]);
                t.push(f(first + h));
            }
        }
        let r2 = super::super::r_squared(&p, &t).unwrap();
        assert!(r2 > 0.99, "{r2}");
    }
}
