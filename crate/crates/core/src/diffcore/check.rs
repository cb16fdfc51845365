use super::{DiffError, Tape, Tensor, Var};

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences with step `eps`, returning the worst relative error.
///
/// The relative error of each coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-12)`. ReLU kinks use a zero
/// subgradient, so points sitting exactly on a kink report a large error
/// without failing.
pub fn check_gradients<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x);
    let value = tape.value(y).data().first().copied().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(DiffError::NonFiniteValue {
            context: "function value".into(),
        });
    }
    let analytic = tape.grad(y, &[x])?.remove(0);

    let eval = |p: Tensor| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let x = tape.param(p);
        let y = f(&mut tape, x);
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(DiffError::NonScalarOutput { len: v.len() });
        }
        Ok(v.data()[0])
    };

    let mut worst = 0.0_f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(DiffError::NonFiniteValue {
                context: format!("gradient coordinate {i}"),
            });
        }
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
