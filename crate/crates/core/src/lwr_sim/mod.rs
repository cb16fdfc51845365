//! First-order Godunov solver for the LWR conservation law with the
//! Greenshields closure, and a synthetic corridor dataset generator.

mod synth;

pub use synth::{synth_dataset, SynthConfig, SynthData, WeatherDriver};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("density {0} outside [0, rho_max]")]
    DensityOutOfRange(f64),
    #[error("time step {dt} h exceeds the CFL limit {limit} h")]
    CflViolation { dt: f64, limit: f64 },
    #[error("sensor at {0} km lies outside the corridor")]
    SensorOutOfCorridor(f64),
    #[error("invalid corridor: {0}")]
    BadCorridor(String),
    #[error("{0}")]
    Io(String),
}

/// Greenshields speed `x_fspd·(1 − ρ/ρ_max)`.
pub fn greenshields_speed(rho: f64, rho_max: f64, x_fspd: f64) -> Result<f64, SimError> {
    if !(0.0..=rho_max).contains(&rho) {
        return Err(SimError::DensityOutOfRange(rho));
    }
    Ok(x_fspd * (1.0 - rho / rho_max))
}

/// Inverse of [`greenshields_speed`].
pub fn greenshields_density(speed: f64, rho_max: f64, x_fspd: f64) -> f64 {
    rho_max * (1.0 - speed / x_fspd)
}

pub fn flux(rho: f64, rho_max: f64, x_fspd: f64) -> f64 {
    rho * x_fspd * (1.0 - rho / rho_max)
}

/// Exact Riemann flux for the concave Greenshields flux, written as
/// `min(demand(ρ_L), supply(ρ_R))` so that the two sides may have
/// different free-flow speeds.
pub fn godunov_flux(rho_l: f64, rho_r: f64, rho_max: f64, fspd_l: f64, fspd_r: f64) -> f64 {
    let crit = 0.5 * rho_max;
    let demand = flux(rho_l.min(crit), rho_max, fspd_l);
    let supply = flux(rho_r.max(crit), rho_max, fspd_r);
    demand.min(supply)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Boundary {
    Periodic,
    /// Ghost cells hold the given densities upstream and downstream.
    InflowOutflow { upstream: f64, downstream: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corridor {
    /// Length in km.
    pub length: f64,
    pub cells: usize,
    /// Jam density in vehicles per km.
    pub rho_max: f64,
    /// Free-flow speed per cell in km/h.
    pub x_fspd: Vec<f64>,
    pub boundary: Boundary,
}

impl Corridor {
    pub fn uniform(length: f64, cells: usize, rho_max: f64, x_fspd: f64, boundary: Boundary) -> Self {
        Self {
            length,
            cells,
            rho_max,
            x_fspd: vec![x_fspd; cells],
            boundary,
        }
    }

    pub fn dx(&self) -> f64 {
        self.length / self.cells as f64
    }

    /// Largest stable step: the flux derivative is bounded by the free-flow speed.
    pub fn cfl_limit(&self) -> f64 {
        let vmax = self.x_fspd.iter().cloned().fold(0.0, f64::max);
        self.dx() / vmax
    }

    pub fn centre(&self, cell: usize) -> f64 {
        (cell as f64 + 0.5) * self.dx()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.cells < 2 || self.length <= 0.0 || self.rho_max <= 0.0 {
            return Err(SimError::BadCorridor("need positive length, jam density and at least 2 cells".into()));
        }
        if self.x_fspd.len() != self.cells || self.x_fspd.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(SimError::BadCorridor("one positive free-flow speed per cell".into()));
        }
        Ok(())
    }

    /// Advances one step with free-flow speeds scaled by `factor`.
    pub fn step(&self, rho: &[f64], dt: f64, factor: f64, boundary: Boundary) -> Vec<f64> {
        let m = self.cells;
        let vf = |i: usize| self.x_fspd[i] * factor;
        let (ghost_l, ghost_r) = match boundary {
            Boundary::Periodic => (rho[m - 1], rho[0]),
            Boundary::InflowOutflow { upstream, downstream } => (upstream, downstream),
        };
        let (vf_gl, vf_gr) = match boundary {
            Boundary::Periodic => (vf(m - 1), vf(0)),
            Boundary::InflowOutflow { .. } => (vf(0), vf(m - 1)),
        };
        // interface i sits between cell i−1 and cell i
        let mut fluxes = Vec::with_capacity(m + 1);
        fluxes.push(godunov_flux(ghost_l, rho[0], self.rho_max, vf_gl, vf(0)));
        for i in 1..m {
            fluxes.push(godunov_flux(rho[i - 1], rho[i], self.rho_max, vf(i - 1), vf(i)));
        }
        fluxes.push(godunov_flux(rho[m - 1], ghost_r, self.rho_max, vf(m - 1), vf_gr));
        if matches!(boundary, Boundary::Periodic) {
            fluxes[m] = fluxes[0];
        }
        let k = dt / self.dx();
        (0..m)
            .map(|i| (rho[i] - k * (fluxes[i + 1] - fluxes[i])).clamp(0.0, self.rho_max))
            .collect()
    }
}

/// Densities on the simulation grid, `(steps + 1) × cells`, row 0 initial.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    pub cells: usize,
    pub dt: f64,
    pub rho: Vec<f64>,
}

impl DensityField {
    pub fn steps(&self) -> usize {
        self.rho.len() / self.cells
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.rho[step * self.cells..(step + 1) * self.cells]
    }

    pub fn total_mass(&self, step: usize, dx: f64) -> f64 {
        self.row(step).iter().sum::<f64>() * dx
    }

    /// Greenshields speeds of every cell.
    pub fn speeds(&self, corridor: &Corridor) -> Vec<f64> {
        self.rho
            .iter()
            .enumerate()
            .map(|(k, &r)| corridor.x_fspd[k % self.cells] * (1.0 - r / corridor.rho_max))
            .collect()
    }
}

pub fn simulate_lwr(corridor: &Corridor, initial: &[f64], steps: usize, dt: f64) -> Result<DensityField, SimError> {
    corridor.validate()?;
    if initial.len() != corridor.cells {
        return Err(SimError::BadCorridor(format!(
            "{} initial densities for {} cells",
            initial.len(),
            corridor.cells
        )));
    }
    if let Some(&bad) = initial.iter().find(|&&r| !(0.0..=corridor.rho_max).contains(&r)) {
        return Err(SimError::DensityOutOfRange(bad));
    }
    let limit = corridor.cfl_limit();
    if dt <= 0.0 || dt > limit * (1.0 + 1e-12) {
        return Err(SimError::CflViolation { dt, limit });
    }
    let mut rho = Vec::with_capacity((steps + 1) * corridor.cells);
    rho.extend_from_slice(initial);
    let mut cur = initial.to_vec();
    for _ in 0..steps {
        cur = corridor.step(&cur, dt, 1.0, corridor.boundary);
        rho.extend_from_slice(&cur);
    }
    Ok(DensityField {
        cells: corridor.cells,
        dt,
        rho,
    })
}

/// Speed-form LWR residual `∂x/∂t + (2x − x_fspd)·∂x/∂l` of a simulated
/// field, by central differences at interior grid points.
///
/// Periodic corridors wrap in space; otherwise the end cells are skipped.
pub fn fd_speed_residual(field: &DensityField, corridor: &Corridor) -> Vec<f64> {
    let m = field.cells;
    let speeds = field.speeds(corridor);
    let x = |s: usize, i: usize| speeds[s * m + i];
    let (dt, dx) = (field.dt, corridor.dx());
    let periodic = matches!(corridor.boundary, Boundary::Periodic);
    let mut out = Vec::new();
    for s in 1..field.steps().saturating_sub(1) {
        for i in 0..m {
            let (l, r) = if periodic {
                ((i + m - 1) % m, (i + 1) % m)
            } else if i == 0 || i + 1 == m {
                continue;
            } else {
                (i - 1, i + 1)
            };
            let xt = (x(s + 1, i) - x(s - 1, i)) / (2.0 * dt);
            let xl = (x(s, r) - x(s, l)) / (2.0 * dx);
            out.push(xt + (2.0 * x(s, i) - corridor.x_fspd[i]) * xl);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn greenshields_examples() {
        assert_eq!(greenshields_speed(0.0, 120.0, 100.0).unwrap(), 100.0);
        assert_eq!(greenshields_speed(120.0, 120.0, 100.0).unwrap(), 0.0);
        assert_eq!(greenshields_speed(121.0, 120.0, 100.0), Err(SimError::DensityOutOfRange(121.0)));
        for k in 0..=120 {
            let rho = k as f64;
            let x = greenshields_speed(rho, 120.0, 100.0).unwrap();
            assert!((greenshields_density(x, 120.0, 100.0) - rho).abs() < 1e-12);
        }
    }

    /// Exact Riemann flux from the definition: min of f over [ρ_L, ρ_R]
    /// when ρ_L ≤ ρ_R, max over [ρ_R, ρ_L] otherwise.
    fn riemann_oracle(l: f64, r: f64, rho_max: f64, vf: f64) -> f64 {
        let f = |x: f64| flux(x, rho_max, vf);
        let crit = rho_max / 2.0;
        if l <= r {
            f(l).min(f(r))
        } else if r <= crit && crit <= l {
            f(crit)
        } else {
            f(l).max(f(r))
        }
    }

    #[test]
    fn constant_state_is_steady() {
        let c = Corridor::uniform(10.0, 50, 120.0, 100.0, Boundary::Periodic);
        let f = simulate_lwr(&c, &[37.0; 50], 200, c.cfl_limit()).unwrap();
        assert!(f.row(200).iter().all(|&r| (r - 37.0).abs() < 1e-12));
    }

    #[test]
    fn periodic_mass_conserved() {
        let c = Corridor::uniform(10.0, 80, 120.0, 100.0, Boundary::Periodic);
        let init: Vec<f64> = (0..80).map(|i| 60.0 + 50.0 * (i as f64 * 0.3).sin()).collect();
        let f = simulate_lwr(&c, &init, 1000, 0.9 * c.cfl_limit()).unwrap();
        let m0 = f.total_mass(0, c.dx());
        let m1 = f.total_mass(1000, c.dx());
        assert!(((m1 - m0) / m0).abs() < 1e-10);
    }

    #[test]
    fn cfl_and_range_errors() {
        let c = Corridor::uniform(10.0, 10, 120.0, 100.0, Boundary::Periodic);
        assert!(matches!(
            simulate_lwr(&c, &[10.0; 10], 1, 2.0 * c.cfl_limit()),
            Err(SimError::CflViolation { .. })
        ));
        let mut init = vec![10.0; 10];
        init[3] = -1.0;
        assert_eq!(simulate_lwr(&c, &init, 1, 0.001), Err(SimError::DensityOutOfRange(-1.0)));
    }

    #[test]
    fn fd_residual_vanishes_on_constant_field() {
        let c = Corridor::uniform(10.0, 20, 120.0, 100.0, Boundary::Periodic);
        let f = simulate_lwr(&c, &[50.0; 20], 10, 0.001).unwrap();
        assert!(fd_speed_residual(&f, &c).iter().all(|r| r.abs() < 1e-9));
    }

    proptest! {
        #[test]
        fn godunov_flux_matches_riemann_oracle(l in 0.0f64..120.0, r in 0.0f64..120.0) {
            let a = godunov_flux(l, r, 120.0, 100.0, 100.0);
            prop_assert!((a - riemann_oracle(l, r, 120.0, 100.0)).abs() < 1e-9);
        }

        #[test]
        fn maximum_principle(seed in prop::collection::vec(0.0f64..120.0, 30)) {
            let c = Corridor::uniform(6.0, 30, 120.0, 100.0, Boundary::Periodic);
            let lo = seed.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = seed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let f = simulate_lwr(&c, &seed, 100, c.cfl_limit()).unwrap();
            prop_assert!(f.rho.iter().all(|&r| r >= lo - 1e-9 && r <= hi + 1e-9));
        }
    }
}
