use super::RegionError;
use crate::diffcore::Tensor;
use crate::geo::euclid;

/// Dense binary adjacency. Row `i` lists the in-neighbours of node `i`,
/// so aggregation is `Â · H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    n: usize,
    data: Vec<f64>,
}

impl Adjacency {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(n);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.n + col] = v;
    }

    /// Whether messages flow from `from` into `to`.
    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.get(to, from) != 0.0
    }

    pub fn in_degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| j != i && self.get(i, j) != 0.0).count()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|i| self.in_degree(i)).max().unwrap_or(0)
    }

    pub fn in_neighbours(&self, i: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&j| j != i && self.get(i, j) != 0.0)
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Sub-adjacency over `nodes`, in the given order.
    pub fn restrict(&self, nodes: &[usize]) -> Self {
        let m = nodes.len();
        let mut out = Self::zeros(m);
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate() {
                out.data[a * m + b] = self.get(i, j);
            }
        }
        out
    }

    /// Each nonzero row divided by its sum; zero rows stay zero.
    pub fn row_normalised(&self) -> Tensor {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.n.max(1)) {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Tensor::new(vec![self.n, self.n], data).expect("square")
    }
}

/// Standard deviation of all pairwise planar distances (1.0 when degenerate).
pub fn default_bandwidth(positions: &[[f64; 2]]) -> f64 {
    let mut d = Vec::new();
    for i in 0..positions.len() {
        for j in 0..i {
            d.push(euclid(positions[i], positions[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
    let sd = var.sqrt();
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

/// Thresholded Gaussian kernel over planar distances; the diagonal is 1.
///
/// The `>=` comparison carries a 1e-12 relative slack so a distance placed
/// exactly on the threshold keeps its edge despite rounding in `exp`.
pub fn build_spatial_adjacency(positions: &[[f64; 2]], sigma: f64, epsilon: f64) -> Adjacency {
    let n = positions.len();
    let mut a = Adjacency::zeros(n);
    for i in 0..n {
        a.set(i, i, 1.0);
        for j in 0..i {
            let d = euclid(positions[i], positions[j]);
            if (-(d * d) / (sigma * sigma)).exp() >= epsilon * (1.0 - 1e-12) {
                a.set(i, j, 1.0);
                a.set(j, i, 1.0);
            }
        }
    }
    a
}

/// Classic DTW with absolute-difference cost and no window constraint.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64, RegionError> {
    if a.is_empty() || b.is_empty() {
        return Err(RegionError::EmptySeries);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (x - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Directed DTW adjacency from precomputed pair costs.
///
/// Each source node receives in-edges from its `q_kk` cheapest other
/// sources; each target node receives in-edges from its `q_ku` cheapest
/// sources. Targets never send. Ties go to the lower node index.
pub fn build_temporal_adjacency_from_costs(
    n: usize,
    cost: impl Fn(usize, usize) -> f64,
    sources: &[usize],
    targets: &[usize],
    q_kk: usize,
    q_ku: usize,
) -> Result<Adjacency, RegionError> {
    if q_kk > sources.len().saturating_sub(1) {
        return Err(RegionError::InsufficientObserved {
            q: q_kk,
            available: sources.len().saturating_sub(1),
        });
    }
    if !targets.is_empty() && q_ku > sources.len() {
        return Err(RegionError::InsufficientObserved {
            q: q_ku,
            available: sources.len(),
        });
    }
    let mut a = Adjacency::zeros(n);
    let mut pick = |receiver: usize, q: usize| {
        let mut cands: Vec<(f64, usize)> = sources
            .iter()
            .filter(|&&s| s != receiver)
            .map(|&s| (cost(receiver, s), s))
            .collect();
        cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, s) in cands.iter().take(q) {
            a.set(receiver, s, 1.0);
        }
    };
    for &s in sources {
        pick(s, q_kk);
    }
    for &t in targets {
        pick(t, q_ku);
    }
    Ok(a)
}

/// Directed DTW adjacency over `n` node series.
pub fn build_temporal_adjacency(
    series: &[Vec<f64>],
    sources: &[usize],
    targets: &[usize],
    q_kk: usize,
    q_ku: usize,
) -> Result<Adjacency, RegionError> {
    let n = series.len();
    let mut memo = vec![f64::NAN; n * n];
    let mut involved: Vec<usize> = sources.iter().chain(targets).copied().collect();
    involved.sort_unstable();
    involved.dedup();
    for &i in &involved {
        for &j in sources {
            if i != j && memo[i * n + j].is_nan() {
                let d = dtw_distance(&series[i], &series[j])?;
                memo[i * n + j] = d;
                memo[j * n + i] = d;
            }
        }
    }
    build_temporal_adjacency_from_costs(n, |i, j| memo[i * n + j], sources, targets, q_kk, q_ku)
}
