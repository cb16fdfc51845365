use super::EvalError;

/// Point-forecast accuracy over a set of paired values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when every truth value is zero.
    pub mape: Option<f64>,
    /// `None` when the truth has zero variance.
    pub r2: Option<f64>,
    pub mape_excluded: usize,
    pub count: usize,
}

/// RMSE, MAE, MAPE (zero-truth entries skipped and counted) and R².
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} predictions for {} truth values",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(EvalError::ShapeMismatch("no values to score".into()));
    }
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut ape = 0.0;
    let mut excluded = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        let e = p - t;
        se += e * e;
        ae += e.abs();
        if t == 0.0 {
            excluded += 1;
        } else {
            ape += e.abs() / t.abs();
        }
    }
    let kept = pred.len() - excluded;
    Ok(Metrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        mape: (kept > 0).then(|| ape / kept as f64),
        r2: r_squared(pred, truth).ok(),
        mape_excluded: excluded,
        count: pred.len(),
    })
}

/// `1 − Σ(x̂−x)² / Σ(x−x̄)²`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} predictions for {} truth values",
            pred.len(),
            truth.len()
        )));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::ZeroVarianceTruth);
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let m = metrics(&[2.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_eq!(m.rmse, 2.5f64.sqrt());
        assert_eq!(m.mae, 1.5);
        assert_eq!(m.mape, Some(1.0));
        assert_eq!(m.r2, Some(-9.0));
        assert_eq!(m.mape_excluded, 0);
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let truth = [3.0, 5.0, 7.0, 9.0];
        let m = metrics(&truth, &truth).unwrap();
        assert_eq!((m.rmse, m.mae, m.mape, m.r2), (0.0, 0.0, Some(0.0), Some(1.0)));
        let mean = [6.0; 4];
        assert_eq!(metrics(&mean, &truth).unwrap().r2, Some(0.0));
    }

    #[test]
    fn zero_truth_excluded_from_mape() {
        let m = metrics(&[1.0, 3.0], &[0.0, 2.0]).unwrap();
        assert_eq!(m.mape_excluded, 1);
        assert_eq!(m.mape, Some(0.5));
        assert_eq!(metrics(&[1.0], &[0.0]).unwrap().mape, None);
    }

    #[test]
    fn constant_truth_has_no_r2() {
        assert_eq!(r_squared(&[1.0, 2.0], &[4.0, 4.0]), Err(EvalError::ZeroVarianceTruth));
        assert_eq!(metrics(&[4.0, 4.0], &[4.0, 4.0]).unwrap().r2, None);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(metrics(&[1.0], &[1.0, 2.0]), Err(EvalError::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn mape_is_scale_invariant(
            pairs in prop::collection::vec((0.1f64..100.0, 0.1f64..100.0), 1..30),
            c in 0.01f64..100.0,
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
            let ts: Vec<f64> = t.iter().map(|v| v * c).collect();
            let a = metrics(&p, &t).unwrap().mape.unwrap();
            let b = metrics(&ps, &ts).unwrap().mape.unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn truth_mean_scores_zero(t in prop::collection::vec(-50.0f64..50.0, 2..30)) {
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            let var: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
            prop_assume!(var > 1e-6);
            let r2 = r_squared(&vec![mean; t.len()], &t).unwrap();
            prop_assert!(r2.abs() < 1e-12);
        }
    }
}
