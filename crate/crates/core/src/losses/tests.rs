use super::*;
use crate::embeddings::time_coordinate;
use proptest::prelude::*;

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

#[test]
fn pred_loss_examples() {
    let truth = Tensor::from_fn(&[3, 4, 1], |i| i as f64);
    let mut tape = Tape::new();
    let perfect = tape.constant(truth.clone());
    let l = pred_loss(&mut tape, perfect, &truth, &[0, 2]).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);

    let shifted = tape.constant(truth.map(|v| v + 2.0));
    let l = pred_loss(&mut tape, shifted, &truth, &[1, 3]).unwrap();
    assert!((scalar(&tape, l) - 2.0).abs() < 1e-12);

    assert_eq!(pred_loss(&mut tape, shifted, &truth, &[]).unwrap_err(), LossError::EmptyMask);
}

#[test]
fn pred_loss_ignores_unmasked_nodes() {
    let truth = Tensor::zeros(&[2, 3, 1]);
    let mut guess = Tensor::zeros(&[2, 3, 1]);
    guess.data_mut()[1] = 100.0;
    guess.data_mut()[3] = 3.0;
    guess.data_mut()[5] = 4.0;
    let mut tape = Tape::new();
    let g = tape.param(guess);
    let l = pred_loss(&mut tape, g, &truth, &[0, 2]).unwrap();
    // masked entries are 0, 0, 3, 4; node 1 carries the large error
    let expect = ((9.0 + 16.0) / 4.0f64).sqrt();
    assert!((scalar(&tape, l) - expect).abs() < 1e-12);
    let gr = tape.grad(l, &[g]).unwrap();
    assert_eq!(gr[0].data()[1], 0.0);
}

fn contrast(z: Vec<f64>, zm: Vec<f64>, b: usize, omega: f64) -> f64 {
    let d = z.len() / b;
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![b, d], z).unwrap());
    let m = tape.constant(Tensor::new(vec![b, d], zm).unwrap());
    let l = contrastive_loss(&mut tape, a, m, omega).unwrap();
    scalar(&tape, l)
}

#[test]
fn contrastive_examples() {
    let same = vec![1.0, 2.0, 1.0, 2.0];
    assert!(contrast(same.clone(), same, 2, 0.5).abs() < 1e-12);
    let three = vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0];
    assert!((contrast(three.clone(), three, 3, 0.5) - 2f64.ln()).abs() < 1e-12);
    let z = vec![1.0, 0.0, 0.0, 1.0];
    assert!((contrast(z.clone(), z, 2, 0.5) + 2.0).abs() < 1e-12);

    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[1, 3]));
    assert_eq!(contrastive_loss(&mut tape, a, a, 0.5).unwrap_err(), LossError::BatchTooSmall(1));
}

/// Direct evaluation of the per-window formula.
fn contrast_oracle(z: &[f64], zm: &[f64], b: usize, omega: f64) -> f64 {
    let d = z.len() / b;
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nx * ny)
    };
    let mut total = 0.0;
    for t in 0..b {
        let zt = &z[t * d..(t + 1) * d];
        let pos = (cos(zt, &zm[t * d..(t + 1) * d]) / omega).exp();
        let neg: f64 = (0..b)
            .filter(|&u| u != t)
            .map(|u| (cos(zt, &zm[u * d..(u + 1) * d]) / omega).exp())
            .sum();
        total += -(pos / neg).ln();
    }
    total / b as f64
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let zm = Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.7).cos());
    let point = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.9).sin() + 0.2);
    let err = crate::diffcore::check_gradients(
        |tape, x| {
            let m = tape.constant(zm.clone());
            contrastive_loss(tape, x, m, 0.5).unwrap()
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn entropy_examples() {
    let mut tape = Tape::new();
    let one_hot = tape.constant(Tensor::from_fn(&[4, 10], |i| if i % 10 == i / 10 { 1.0 } else { 0.0 }));
    let l = grouping_entropy_loss(&mut tape, &[one_hot]);
    assert!(scalar(&tape, l).abs() <= 1e-7);

    let uniform = tape.constant(Tensor::full(&[6, 10], 0.1));
    let l = grouping_entropy_loss(&mut tape, &[uniform]);
    assert!((scalar(&tape, l) - 10f64.ln()).abs() < 1e-6);

    let la = grouping_entropy_loss(&mut tape, &[one_hot]);
    let lb = grouping_entropy_loss(&mut tape, &[uniform]);
    let both = grouping_entropy_loss(&mut tape, &[one_hot, uniform]);
    let mean = 0.5 * (scalar(&tape, la) + scalar(&tape, lb));
    assert!((scalar(&tape, both) - mean).abs() < 1e-15);
}

#[test]
fn calibration_examples() {
    let r: Vec<f64> = (1..=100).map(|i| if i % 2 == 0 { i as f64 } else { -(i as f64) }).collect();
    assert_eq!(calibrate_delta(&r, 0.5).unwrap(), 50.0);
    assert_eq!(calibrate_delta(&r, 1.0).unwrap(), 100.0);
    assert_eq!(calibrate_delta(&[], 0.5).unwrap_err(), LossError::EmptyResiduals);
    assert!(matches!(calibrate_delta(&r, 0.0), Err(LossError::BadQuantile(_))));
}

#[test]
fn huber_examples() {
    let d: f64 = 0.7;
    let quad = 0.5 * d * d;
    let lin = d * (d - 0.5 * d);
    assert!((quad - lin).abs() < 1e-12);
    assert!((huber_loss(&[d], d).unwrap() - quad).abs() < 1e-15);
    assert!((huber_loss(&[-2.0 * d], d).unwrap() - 1.5 * d * d).abs() < 1e-15);
    let r = [0.1, -0.4, 0.3];
    let half_ms = 0.5 * r.iter().map(|x| x * x).sum::<f64>() / 3.0;
    assert!((huber_loss(&r, 0.4).unwrap() - half_ms).abs() < 1e-15);
    assert_eq!(huber_loss(&r, 0.0).unwrap_err(), LossError::NonPositiveDelta(0.0));
}

#[test]
fn total_loss_examples() {
    let zero = LossWeights { lambda: 0.0, mu: 0.0, theta: 0.0, omega: 0.5 };
    assert_eq!(total_loss(1.5, 3.0, 4.0, 5.0, &zero).unwrap(), 1.5);
    let w = LossWeights::default();
    assert_eq!(w.mu, 1.0);
    let w2 = LossWeights { theta: 2.0 * w.theta, ..w };
    let a = total_loss(1.5, 3.0, 4.0, 5.0, &w).unwrap();
    let b = total_loss(1.5, 3.0, 4.0, 5.0, &w2).unwrap();
    assert!((b - a - w.theta * 5.0).abs() < 1e-12);
    assert_eq!(total_loss(f64::NAN, 0.0, 0.0, 0.0, &w).unwrap_err(), LossError::NonFiniteTerm("pred"));
}

/// Forecast built directly from the coordinates: `x̂[h][n] = a·t̃(h, n) + b·L[n][0] + k`.
fn linear_field(a: f64, b: f64, k: f64) -> (Tape, Var, Var, Var) {
    let (h_len, n) = (3, 4);
    let mut tape = Tape::new();
    let tc = time_coordinate(&mut tape, &[10, 11, 12], n, 96);
    let l = tape.leaf(Tensor::from_fn(&[n, 2], |i| i as f64 * 0.1), true);
    let sel = tape.constant(Tensor::vector(vec![1.0, 0.0]).reshaped(&[2, 1]).unwrap());
    let space = tape.matmul(l, sel);
    let space = tape.scale(space, b);
    let idx: Vec<Option<usize>> = (0..h_len * n).map(|r| Some(r % n)).collect();
    let space = tape.gather_rows(space, std::sync::Arc::new(idx));
    let time = tape.scale(tc, a);
    let x = tape.add(time, space);
    let x = tape.add_scalar(x, k);
    let x = tape.reshape(x, &[h_len, n, 1]);
    (tape, x, tc, l)
}

#[test]
fn residual_of_constant_field_is_zero() {
    let (tape, x, tc, l) = linear_field(0.0, 0.0, 3.0);
    let (r, _) = physics_residual(&tape, x, tc, l, 0, &[50.0; 4], 1.0, 0.0).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0));
}

#[test]
fn residual_of_temporal_ramp_is_its_slope() {
    let (tape, x, tc, l) = linear_field(0.75, 0.0, 0.0);
    let (r, g) = physics_residual(&tape, x, tc, l, 0, &[50.0; 4], 1.0, 0.0).unwrap();
    assert!(r.data().iter().all(|&v| (v - 0.75).abs() < 1e-14));
    assert!(g.g_space.data().iter().all(|&v| v == 0.0));
}

#[test]
fn residual_spatial_term_and_units() {
    let (tape, x, tc, l) = linear_field(0.5, 2.0, 1.0);
    let fspd = [30.0, 40.0, 50.0, 60.0];
    let (scale, offset) = (10.0, 20.0);
    let (r, _) = physics_residual(&tape, x, tc, l, 0, &fspd, scale, offset).unwrap();
    let xv = tape.value(x);
    for h in 0..3 {
        for n in 0..4 {
            let speed = scale * xv.data()[h * 4 + n] + offset;
            let expect = scale * 0.5 + (2.0 * speed - fspd[n]) * scale * 2.0;
            assert!((r.data()[h * 4 + n] - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn residual_requires_attached_embeddings() {
    let mut tape = Tape::new();
    let tc = tape.constant(Tensor::zeros(&[4, 1]));
    let l = tape.leaf(Tensor::zeros(&[2, 2]), true);
    let x = tape.constant(Tensor::zeros(&[2, 2, 1]));
    assert!(matches!(
        physics_residual(&tape, x, tc, l, 0, &[1.0, 1.0], 1.0, 0.0),
        Err(LossError::GradUnavailable(_))
    ));
}

#[test]
fn zero_forecast_with_zero_free_flow_has_zero_residual() {
    let (tape, x, tc, l) = linear_field(0.0, 0.0, 0.0);
    let (r, _) = physics_residual(&tape, x, tc, l, 0, &[0.0; 4], 1.0, 0.0).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0));
}

#[test]
fn physics_loss_matches_residual_penalties() {
    let (mut tape, x, tc, l) = linear_field(0.5, 2.0, 1.0);
    let fspd = [30.0, 40.0, 50.0, 60.0];
    let (r, g) = physics_residual(&tape, x, tc, l, 0, &fspd, 10.0, 20.0).unwrap();
    let q = physics_loss(&mut tape, x, &g, &fspd, 10.0, 20.0, PhysicsPenalty::Quadratic).unwrap();
    let half_ms = 0.5 * r.data().iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
    assert!((scalar(&tape, q) - half_ms).abs() < 1e-9 * half_ms);
    let delta = calibrate_delta(r.data(), 0.5).unwrap();
    let h = physics_loss(&mut tape, x, &g, &fspd, 10.0, 20.0, PhysicsPenalty::Huber(delta)).unwrap();
    assert!((scalar(&tape, h) - huber_loss(r.data(), delta).unwrap()).abs() < 1e-9);
    // tau = 1 puts every residual in the quadratic branch
    let full = calibrate_delta(r.data(), 1.0).unwrap();
    let h1 = physics_loss(&mut tape, x, &g, &fspd, 10.0, 20.0, PhysicsPenalty::Huber(full)).unwrap();
    assert!((scalar(&tape, h1) - half_ms).abs() < 1e-9 * half_ms);
}

proptest! {
    #[test]
    fn contrastive_matches_oracle_and_is_scale_invariant(
        z in prop::collection::vec(-2.0f64..2.0, 12),
        zm in prop::collection::vec(-2.0f64..2.0, 12),
        k in 0.1f64..20.0,
    ) {
        prop_assume!(z.chunks(4).chain(zm.chunks(4)).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let base = contrast(z.clone(), zm.clone(), 3, 0.5);
        prop_assert!((base - contrast_oracle(&z, &zm, 3, 0.5)).abs() < 1e-9);
        let scaled = contrast(z.iter().map(|v| v * k).collect(), zm.iter().map(|v| v * k).collect(), 3, 0.5);
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn huber_non_increasing_in_delta(r in prop::collection::vec(-10.0f64..10.0, 1..20), d1 in 0.01f64..5.0, extra in 0.0f64..5.0) {
        let a = huber_loss(&r, d1).unwrap();
        let b = huber_loss(&r, d1 + extra).unwrap();
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn entropy_within_bounds(logits in prop::collection::vec(-8.0f64..8.0, 30)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 10], logits).unwrap());
        let w = tape.softmax_rows(x);
        let l = grouping_entropy_loss(&mut tape, &[w]);
        let v = scalar(&tape, l);
        prop_assert!(v >= -1e-7 && v <= 10f64.ln() + 1e-6);
    }
}
