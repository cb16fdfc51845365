use gencast::lwr_sim::{fd_speed_residual, flux, simulate_lwr, Boundary, Corridor};

const RHO_MAX: f64 = 120.0;
const VF: f64 = 100.0;

/// Self-similar solution of the Riemann problem with ρ_L > ρ_R for the
/// Greenshields flux: a fan where f'(ρ) = ξ, i.e. ρ = ρ_max(1 − ξ/v_f)/2.
fn rarefaction(xi: f64, rho_l: f64, rho_r: f64) -> f64 {
    let speed = |r: f64| VF * (1.0 - 2.0 * r / RHO_MAX);
    if xi <= speed(rho_l) {
        rho_l
    } else if xi >= speed(rho_r) {
        rho_r
    } else {
        0.5 * RHO_MAX * (1.0 - xi / VF)
    }
}

fn rarefaction_error(cells: usize) -> f64 {
    let (rl, rr) = (0.8 * RHO_MAX, 0.2 * RHO_MAX);
    let length = 2.0;
    let c = Corridor::uniform(length, cells, RHO_MAX, VF, Boundary::InflowOutflow { upstream: rl, downstream: rr });
    let x0 = -1.0;
    let init: Vec<f64> = (0..cells).map(|i| if x0 + c.centre(i) < 0.0 { rl } else { rr }).collect();
    let t_end = 0.01;
    let steps = (t_end / (0.9 * c.cfl_limit())).ceil() as usize;
    let f = simulate_lwr(&c, &init, steps, t_end / steps as f64).unwrap();
    let last = f.row(steps);
    (0..cells)
        .map(|i| (last[i] - rarefaction((x0 + c.centre(i)) / t_end, rl, rr)).abs() * c.dx())
        .sum()
}

#[test]
fn rarefaction_converges_at_first_order() {
    let errs: Vec<f64> = [200, 400, 800, 1600].iter().map(|&m| rarefaction_error(m)).collect();
    for w in errs.windows(2) {
        let rate = (w[0] / w[1]).log2();
        assert!((0.7..=1.1).contains(&rate), "errors {errs:?}, rate {rate}");
    }
}

fn smooth_residual(cells: usize) -> f64 {
    let length = 10.0;
    let c = Corridor::uniform(length, cells, RHO_MAX, VF, Boundary::Periodic);
    let init: Vec<f64> = (0..cells)
        .map(|i| 60.0 + 20.0 * (2.0 * std::f64::consts::PI * c.centre(i) / length).sin())
        .collect();
    let t_end = 0.02;
    let steps = (t_end / (0.5 * c.cfl_limit())).ceil() as usize;
    let f = simulate_lwr(&c, &init, steps, t_end / steps as f64).unwrap();
    let r = fd_speed_residual(&f, &c);
    r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64
}

#[test]
fn smooth_field_residual_shrinks_under_refinement() {
    let r: Vec<f64> = [50, 100, 200, 400].iter().map(|&m| smooth_residual(m)).collect();
    for w in r.windows(2) {
        assert!(w[1] < w[0], "{r:?}");
    }
}

#[test]
fn periodic_conservation_over_long_runs() {
    let c = Corridor::uniform(5.0, 64, RHO_MAX, VF, Boundary::Periodic);
    let init: Vec<f64> = (0..64).map(|i| if (16..40).contains(&i) { 100.0 } else { 15.0 }).collect();
    let f = simulate_lwr(&c, &init, 1000, c.cfl_limit()).unwrap();
    let m0 = f.total_mass(0, c.dx());
    for s in [10, 100, 1000] {
        assert!(((f.total_mass(s, c.dx()) - m0) / m0).abs() < 1e-10);
    }
    assert!(f.rho.iter().all(|&r| (15.0 - 1e-9..=100.0 + 1e-9).contains(&r)));
}

#[test]
fn flux_peaks_at_half_jam_density() {
    let peak = flux(RHO_MAX / 2.0, RHO_MAX, VF);
    assert_eq!(peak, VF * RHO_MAX / 4.0);
    assert!(flux(0.49 * RHO_MAX, RHO_MAX, VF) < peak);
}
